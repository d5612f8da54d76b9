use super::dataset::{Dataset, Example, Provenance, UnlabeledExample};
use crate::error::{Error, Result};

pub const DEFAULT_TAU: f64 = 0.95;

#[derive(Clone, Debug, PartialEq)]
pub enum DropReason {
    /// Zero feature vector; cosine similarity is undefined.
    ZeroVector,
    /// Nearest labeled neighbor is below the threshold.
    BelowThreshold { best: f64 },
    /// Same query and features already present in the labeled set.
    AlreadyLabeled,
}

#[derive(Clone, Debug)]
pub struct Propagation {
    /// Labeled examples followed by the adopted ones, in pool order.
    pub dataset: Dataset,
    /// `(pool index, anchor index in the labeled set, similarity)`.
    pub adopted: Vec<(usize, usize, f64)>,
    pub dropped: Vec<(usize, DropReason)>,
}

/// Nearest anchor by cosine similarity; ties go to the lowest index.
fn nearest(anchors: &[(usize, &Example)], u: &UnlabeledExample) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for &(idx, ex) in anchors {
        if let Some(sim) = u.features.cosine(&ex.features) {
            if best.map_or(true, |(_, b)| sim > b) {
                best = Some((idx, sim));
            }
        }
    }
    best
}

/// Single-hop label propagation over dense-feature cosine similarity.
///
/// Only examples that were not themselves propagated act as anchors, so a
/// second run over the same pool adds nothing.
pub fn propagate_labels(labeled: &Dataset, unlabeled: &[UnlabeledExample], tau: f64) -> Result<Propagation> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::Config(format!("tau must lie in (0, 1], got {tau}")));
    }
    if labeled.is_empty() {
        return Err(Error::Data("label propagation needs at least one labeled example".into()));
    }
    let anchors: Vec<(usize, &Example)> = labeled
        .examples
        .iter()
        .enumerate()
        .filter(|(_, e)| e.provenance != Provenance::Propagated)
        .collect();

    let mut out = labeled.examples.clone();
    let mut adopted = Vec::new();
    let mut dropped = Vec::new();
    for (i, u) in unlabeled.iter().enumerate() {
        if labeled
            .examples
            .iter()
            .any(|e| e.query == u.query && e.features == u.features)
        {
            dropped.push((i, DropReason::AlreadyLabeled));
            continue;
        }
        if u.features.norm() == 0.0 {
            dropped.push((i, DropReason::ZeroVector));
            continue;
        }
        match nearest(&anchors, u) {
            Some((idx, sim)) if sim >= tau => {
                out.push(Example {
                    query: u.query.clone(),
                    features: u.features.clone(),
                    label: labeled.examples[idx].label,
                    provenance: Provenance::Propagated,
                    subpop: u.subpop,
                });
                adopted.push((i, idx, sim));
            }
            Some((_, sim)) => dropped.push((i, DropReason::BelowThreshold { best: sim })),
            None => dropped.push((i, DropReason::BelowThreshold { best: f64::NAN })),
        }
    }
    Ok(Propagation {
        dataset: labeled.with_examples(out, labeled.split),
        adopted,
        dropped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::dataset::{SplitTag, Subpopulation};
    use crate::features::sparse::SparseFeatureVector;

    fn fv(e: Vec<(usize, f64)>) -> SparseFeatureVector {
        SparseFeatureVector::new(e, 4).unwrap()
    }

    fn labeled(items: Vec<(Vec<(usize, f64)>, u8)>) -> Dataset {
        Dataset {
            examples: items
                .into_iter()
                .enumerate()
                .map(|(i, (f, label))| Example {
                    query: format!("seed {i}"),
                    features: fv(f),
                    label,
                    provenance: Provenance::Seeded,
                    subpop: Subpopulation::Both,
                })
                .collect(),
            d_features: 4,
            feature_vocab: (0..4).map(|i| i.to_string()).collect(),
            split: SplitTag::Full,
        }
    }

    fn pool(f: Vec<(usize, f64)>) -> UnlabeledExample {
        UnlabeledExample {
            query: "pool".into(),
            features: fv(f),
            subpop: Subpopulation::Both,
        }
    }

    #[test]
    fn identical_features_are_adopted() {
        let l = labeled(vec![(vec![(0, 0.4), (1, 0.8)], 1)]);
        let p = propagate_labels(&l, &[pool(vec![(0, 0.4), (1, 0.8)])], 0.9).unwrap();
        assert_eq!(p.dataset.len(), 2);
        assert_eq!(p.dataset.examples[1].label, 1);
        assert_eq!(p.dataset.examples[1].provenance, Provenance::Propagated);
    }

    #[test]
    fn orthogonal_and_zero_vectors_are_dropped() {
        let l = labeled(vec![(vec![(0, 1.0)], 1)]);
        let p = propagate_labels(&l, &[pool(vec![(1, 1.0)]), pool(vec![])], 0.5).unwrap();
        assert_eq!(p.dataset.len(), 1);
        assert_eq!(p.dropped[0], (0, DropReason::BelowThreshold { best: 0.0 }));
        assert_eq!(p.dropped[1], (1, DropReason::ZeroVector));
    }

    #[test]
    fn ties_go_to_the_lowest_index() {
        let l = labeled(vec![(vec![(0, 1.0)], 0), (vec![(0, 0.5)], 1)]);
        let p = propagate_labels(&l, &[pool(vec![(0, 0.2)])], 0.9).unwrap();
        assert_eq!(p.adopted[0].1, 0);
        assert_eq!(p.dataset.examples[2].label, 0);
    }

    #[test]
    fn argument_errors() {
        let l = labeled(vec![(vec![(0, 1.0)], 1)]);
        assert!(propagate_labels(&l, &[], 0.0).is_err());
        assert!(propagate_labels(&l, &[], 1.5).is_err());
        let empty = labeled(vec![]);
        assert!(matches!(propagate_labels(&empty, &[], 0.5), Err(Error::Data(_))));
    }
}
