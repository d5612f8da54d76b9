use serde::{Deserialize, Serialize};

use crate::autodiff::NamedTensors;
use crate::model::Params;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Parameter update rule with its running state.
#[derive(Clone, Debug)]
pub enum Optimizer {
    Sgd,
    Adam {
        m: NamedTensors,
        v: NamedTensors,
        t: i32,
    },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, params: &Params) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adam => Optimizer::Adam {
                m: params.zeros_like(),
                v: params.zeros_like(),
                t: 0,
            },
        }
    }

    /// Applies one update. Parameters without a gradient entry are treated as
    /// having a zero gradient.
    pub fn step(&mut self, params: &mut Params, grads: &NamedTensors, lr: f64) {
        match self {
            Optimizer::Sgd => {
                for (name, p) in params.iter_mut() {
                    if let Some(g) = grads.get(name) {
                        for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
                            *w -= lr * d;
                        }
                    }
                }
            }
            Optimizer::Adam { m, v, t } => {
                *t += 1;
                let c1 = 1.0 - ADAM_BETA1.powi(*t);
                let c2 = 1.0 - ADAM_BETA2.powi(*t);
                for (name, p) in params.iter_mut() {
                    let g = grads.get(name);
                    let m = m.get_mut(name).expect("moment for every parameter");
                    let v = v.get_mut(name).expect("moment for every parameter");
                    let (m, v) = (m.data_mut(), v.data_mut());
                    for (i, w) in p.data_mut().iter_mut().enumerate() {
                        let d = g.map_or(0.0, |g| g.data()[i]);
                        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * d;
                        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * d * d;
                        *w -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut NamedTensors, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn one(v: f64) -> NamedTensors {
        let mut p = NamedTensors::new();
        p.insert("w", Tensor::vector(vec![v]).unwrap());
        p
    }

    #[test]
    fn sgd_step() {
        let mut p = one(1.0);
        Optimizer::new(OptimizerKind::Sgd, &p).step(&mut p, &one(0.5), 0.1);
        assert!((p.get("w").unwrap().data()[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // After bias correction the first step is lr * g / (|g| + eps).
        let mut p = one(1.0);
        let mut opt = Optimizer::new(OptimizerKind::Adam, &p);
        opt.step(&mut p, &one(3.0), 0.01);
        let want = 1.0 - 0.01 * 3.0 / (3.0 + ADAM_EPS);
        assert!((p.get("w").unwrap().data()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn clipping() {
        let mut g = NamedTensors::new();
        g.insert("a", Tensor::vector(vec![3.0, 4.0]).unwrap());
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-15);
        assert_eq!(clip_global_norm(&mut g, 2.0), g.global_norm());
    }
}
