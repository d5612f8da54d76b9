//! Discrete AdaBoost over decision stumps, trained on dense features only.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{Dataset, SparseFeatureVector};

/// Rounds whose weighted error reaches this are rejected and end training.
pub const MAX_ERROR: f64 = 0.5 - 1e-12;
/// Floor applied to a zero weighted error before computing its weight.
pub const MIN_ERROR: f64 = 1e-10;

/// `h(x) = polarity` when `x[feature] > threshold`, else `-polarity`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stump {
    pub feature: usize,
    pub threshold: f64,
    pub polarity: i8,
}

impl Stump {
    pub fn vote(&self, value: f64) -> f64 {
        let p = f64::from(self.polarity);
        if value > self.threshold {
            p
        } else {
            -p
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    pub d_features: usize,
    pub n_estimators: usize,
    pub stumps: Vec<(Stump, f64)>,
}

/// Per-round diagnostics from [`train_adaboost_traced`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trace {
    /// Weighted error of every accepted round (before the zero-error floor).
    pub errors: Vec<f64>,
    /// `(1/m) sum exp(-y F(x))` after each accepted round.
    pub exp_loss: Vec<f64>,
    /// Sum of the example weights after each normalization.
    pub weight_sums: Vec<f64>,
}

impl Trace {
    /// `prod 2 sqrt(eps (1 - eps))`, an upper bound on the training error rate.
    pub fn error_bound(&self) -> f64 {
        self.errors
            .iter()
            .map(|&e| 2.0 * (e * (1.0 - e)).sqrt())
            .product()
    }
}

impl Ensemble {
    /// `sum alpha_n h_n(x)` for a dense row.
    pub fn margin(&self, x: &[f64]) -> f64 {
        self.stumps.iter().map(|(s, a)| a * s.vote(x[s.feature])).sum()
    }

    pub fn margin_sparse(&self, x: &SparseFeatureVector) -> f64 {
        self.stumps.iter().map(|(s, a)| a * s.vote(x.score(s.feature))).sum()
    }

    /// Positive margin means class 1; a margin of exactly zero means class 0.
    pub fn predict(&self, x: &[f64]) -> u8 {
        u8::from(self.margin(x) > 0.0)
    }

    pub fn predict_sparse(&self, x: &SparseFeatureVector) -> u8 {
        u8::from(self.margin_sparse(x) > 0.0)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Ensemble> {
        let e: Ensemble = serde_json::from_str(text)?;
        if e.stumps.len() > e.n_estimators {
            return Err(Error::Data("ensemble holds more stumps than n_estimators".into()));
        }
        for (s, a) in &e.stumps {
            if s.feature >= e.d_features || !a.is_finite() || !s.threshold.is_finite() || s.polarity.abs() != 1 {
                return Err(Error::Data(format!("invalid stump {s:?} with weight {a}")));
            }
        }
        Ok(e)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Ensemble> {
        let path = path.as_ref();
        Self::from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

struct Best {
    err: f64,
    stump: Stump,
}

/// Exhaustive search over features, midpoint thresholds and both polarities.
/// `order[j]` lists example indices sorted by feature `j`.
fn best_stump(rows: &[Vec<f64>], y: &[f64], w: &[f64], order: &[Vec<usize>]) -> Option<Best> {
    let pos_total: f64 = w.iter().zip(y).filter(|(_, &t)| t > 0.0).map(|(w, _)| w).sum();
    let neg_total: f64 = w.iter().zip(y).filter(|(_, &t)| t < 0.0).map(|(w, _)| w).sum();
    let mut best: Option<Best> = None;
    for (j, idx) in order.iter().enumerate() {
        let (mut pos_le, mut neg_le) = (0.0, 0.0);
        for k in 0..idx.len() - 1 {
            let i = idx[k];
            if y[i] > 0.0 {
                pos_le += w[i];
            } else {
                neg_le += w[i];
            }
            let (lo, hi) = (rows[i][j], rows[idx[k + 1]][j]);
            if lo == hi {
                continue;
            }
            let threshold = 0.5 * (lo + hi);
            let plus = pos_le + (neg_total - neg_le);
            let minus = neg_le + (pos_total - pos_le);
            for (err, polarity) in [(plus, 1i8), (minus, -1i8)] {
                if best.as_ref().map_or(true, |b| err < b.err) {
                    best = Some(Best {
                        err: err.max(0.0),
                        stump: Stump {
                            feature: j,
                            threshold,
                            polarity,
                        },
                    });
                }
            }
        }
    }
    best
}

pub fn train_adaboost(rows: &[Vec<f64>], labels: &[u8], n_estimators: usize) -> Result<Ensemble> {
    train_adaboost_traced(rows, labels, n_estimators).map(|(e, _)| e)
}

/// Trains on dense rows with labels in `{0, 1}`.
pub fn train_adaboost_traced(rows: &[Vec<f64>], labels: &[u8], n_estimators: usize) -> Result<(Ensemble, Trace)> {
    let m = rows.len();
    if m == 0 || labels.len() != m {
        return Err(Error::Data(format!("{m} rows and {} labels", labels.len())));
    }
    let d = rows[0].len();
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(Error::Data("rows must share a positive width".into()));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::Data("labels must be 0 or 1".into()));
    }
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(Error::Data("AdaBoost needs both classes present".into()));
    }
    if n_estimators == 0 {
        return Err(Error::Config("n_estimators must be positive".into()));
    }
    let y: Vec<f64> = labels.iter().map(|&l| if l == 1 { 1.0 } else { -1.0 }).collect();
    let order: Vec<Vec<usize>> = (0..d)
        .map(|j| {
            let mut idx: Vec<usize> = (0..m).collect();
            idx.sort_by(|&a, &b| rows[a][j].total_cmp(&rows[b][j]).then(a.cmp(&b)));
            idx
        })
        .collect();

    let mut w = vec![1.0 / m as f64; m];
    let mut f = vec![0.0; m];
    let mut ensemble = Ensemble {
        d_features: d,
        n_estimators,
        stumps: Vec::new(),
    };
    let mut trace = Trace::default();
    for _ in 0..n_estimators {
        let Some(best) = best_stump(rows, &y, &w, &order) else { break };
        if best.err >= MAX_ERROR {
            break;
        }
        let perfect = best.err == 0.0;
        let eps = best.err.max(MIN_ERROR);
        let alpha = 0.5 * ((1.0 - eps) / eps).ln();
        for i in 0..m {
            let h = best.stump.vote(rows[i][best.stump.feature]);
            f[i] += alpha * h;
            w[i] *= (-alpha * y[i] * h).exp();
        }
        let total: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= total);
        ensemble.stumps.push((best.stump, alpha));
        trace.errors.push(best.err);
        trace.weight_sums.push(w.iter().sum());
        trace
            .exp_loss
            .push(f.iter().zip(&y).map(|(f, y)| (-y * f).exp()).sum::<f64>() / m as f64);
        if perfect {
            break;
        }
    }
    Ok((ensemble, trace))
}

/// Densifies a dataset's features and trains on them; the text is never read.
pub fn train_on_dataset(ds: &Dataset, n_estimators: usize) -> Result<Ensemble> {
    let rows: Vec<Vec<f64>> = ds.examples.iter().map(|e| e.features.to_dense()).collect();
    let labels: Vec<u8> = ds.examples.iter().map(|e| e.label).collect();
    train_adaboost(&rows, &labels, n_estimators)
}
