use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Sparse relevance scores for a `d_features`-wide vector.
///
/// Indices are strictly increasing and every score lies in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseFeatureVector {
    entries: Vec<(usize, f64)>,
    d_features: usize,
}

impl SparseFeatureVector {
    /// Validates entries that are already in canonical order.
    pub fn new(entries: Vec<(usize, f64)>, d_features: usize) -> Result<Self> {
        for w in entries.windows(2) {
            if w[0].0 >= w[1].0 {
                return Err(Error::Data(format!(
                    "feature indices must be strictly increasing ({} then {})",
                    w[0].0, w[1].0
                )));
            }
        }
        for &(i, s) in &entries {
            if i >= d_features {
                return Err(Error::Data(format!("feature index {i} >= d_features {d_features}")));
            }
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::Data(format!("feature score {s} outside [0, 1]")));
            }
        }
        Ok(SparseFeatureVector { entries, d_features })
    }

    /// Sorts by index first; duplicate indices are still rejected.
    pub fn from_unsorted(mut entries: Vec<(usize, f64)>, d_features: usize) -> Result<Self> {
        entries.sort_by_key(|e| e.0);
        Self::new(entries, d_features)
    }

    pub fn empty(d_features: usize) -> Self {
        SparseFeatureVector {
            entries: Vec::new(),
            d_features,
        }
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    pub fn d_features(&self) -> usize {
        self.d_features
    }

    pub fn score(&self, index: usize) -> f64 {
        self.entries
            .binary_search_by_key(&index, |e| e.0)
            .map(|p| self.entries[p].1)
            .unwrap_or(0.0)
    }

    pub fn is_active(&self, index: usize) -> bool {
        self.score(index) > 0.0
    }

    pub fn norm(&self) -> f64 {
        self.entries.iter().map(|e| e.1 * e.1).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &SparseFeatureVector) -> f64 {
        let (mut i, mut j, mut acc) = (0, 0, 0.0);
        let (a, b) = (&self.entries, &other.entries);
        while i < a.len() && j < b.len() {
            match a[i].0.cmp(&b[j].0) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    acc += a[i].1 * b[j].1;
                    i += 1;
                    j += 1;
                }
            }
        }
        acc
    }

    /// Cosine similarity; `None` when either vector has zero norm.
    pub fn cosine(&self, other: &SparseFeatureVector) -> Option<f64> {
        let (na, nb) = (self.norm(), other.norm());
        (na > 0.0 && nb > 0.0).then(|| self.dot(other) / (na * nb))
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.d_features];
        for &(i, s) in &self.entries {
            out[i] = s;
        }
        out
    }
}

/// Dense `[d_features]` tensor with zeros outside the listed indices.
pub fn densify(sparse: &SparseFeatureVector) -> Tensor {
    Tensor::vector(sparse.to_dense()).expect("scores are finite and d_features > 0")
}
