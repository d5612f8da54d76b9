use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::MetricsReport;
use super::optim::{clip_global_norm, Optimizer, OptimizerKind};
use crate::autodiff::{Graph, NamedTensors};
use crate::error::{Error, Result};
use crate::features::{densify, Dataset, Subpopulation};
use crate::model::forward::{example_logits, loss, Dropout};
use crate::model::Model;
use crate::tensor::Tensor;
use crate::tokenizer::{encode, TokenSequence, Vocab};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub eval_interval: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub dropout: f64,
}

fn default_clip() -> Option<f64> {
    Some(1.0)
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 32,
            max_steps: 3000,
            eval_interval: 100,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            clip_norm: default_clip(),
            dropout: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        // lr = 0 stays legal here so the loop can be run as a no-op.
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return fail("lr must be finite and non-negative");
        }
        if self.batch_size == 0 || self.max_steps == 0 || self.eval_interval == 0 {
            return fail("batch_size, max_steps and eval_interval must be positive");
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return fail("clip_norm must be positive");
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must lie in [0, 1)");
        }
        Ok(())
    }
}

/// One example with its text already tokenized and its features densified.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub tokens: TokenSequence,
    pub features: Tensor,
    pub label: u8,
    pub subpop: Subpopulation,
}

pub fn prepare(ds: &Dataset, vocab: &Vocab, seq_len: usize) -> Vec<Prepared> {
    ds.examples
        .iter()
        .map(|e| Prepared {
            tokens: encode(&e.query, vocab, seq_len),
            features: densify(&e.features),
            label: e.label,
            subpop: e.subpop,
        })
        .collect()
}

/// Mean cross-entropy over `batch` and its gradient, from a single tape.
pub fn batch_loss_and_grad(
    model: &Model,
    batch: &[&Prepared],
    dropout: Option<&mut Dropout>,
) -> Result<(f64, NamedTensors)> {
    let mut dropout = dropout;
    let mut g = Graph::new();
    let mut total = None;
    for ex in batch {
        let z = example_logits(&mut g, &ex.tokens, Some(&ex.features), &model.config, &model.params, true, &mut dropout)?;
        let l = loss(&mut g, z, ex.label)?;
        total = Some(match total {
            None => l,
            Some(t) => g.add(t, l)?,
        });
    }
    let total = total.ok_or_else(|| Error::Data("empty batch".into()))?;
    let mean = g.scale(total, 1.0 / batch.len() as f64)?;
    let value = g.value(mean).item().expect("scalar");
    Ok((value, g.backward(mean)?))
}

pub fn evaluate(model: &Model, examples: &[Prepared]) -> Result<MetricsReport> {
    let mut items = Vec::with_capacity(examples.len());
    for ex in examples {
        items.push((ex.label, model.predict(&ex.tokens, Some(&ex.features))?, ex.subpop));
    }
    Ok(MetricsReport::from_predictions(items))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    /// Mean training loss over the steps since the previous row.
    pub train_loss: f64,
    pub val_f1: f64,
    pub val_precision: f64,
}

pub fn log_to_csv(rows: &[LogRow]) -> String {
    let mut s = String::from("step,train_loss,val_f1,val_precision\n");
    for r in rows {
        s.push_str(&format!("{},{:.6},{:.6},{:.6}\n", r.step, r.train_loss, r.val_f1, r.val_precision));
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters at the evaluation with the highest validation F1 (the
    /// earliest one on ties).
    pub best: Model,
    pub best_step: usize,
    pub best_val_f1: f64,
    pub last: Model,
    pub log: Vec<LogRow>,
}

/// Endless stream of indices: successive seeded permutations of `0..n`.
struct BatchOrder {
    rng: ChaCha8Rng,
    perm: Vec<usize>,
    pos: usize,
}

impl BatchOrder {
    fn new(n: usize, seed: u64) -> Self {
        BatchOrder {
            rng: ChaCha8Rng::seed_from_u64(seed),
            perm: (0..n).collect(),
            pos: n,
        }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.perm.len() {
                self.perm.sort_unstable();
                self.perm.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.perm[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn diverged(step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::Divergence {
            step,
            detail: format!("non-finite value in {op}"),
        },
        other => other,
    }
}

pub fn train(model: Model, cfg: &TrainConfig, train_set: &[Prepared], val_set: &[Prepared]) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Data("training and validation sets must be nonempty".into()));
    }
    let mut model = model;
    let mut order = BatchOrder::new(train_set.len(), cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer, &model.params);
    let mut dropout = (cfg.dropout > 0.0)
        .then(|| Dropout::new(cfg.dropout, ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xD0D0_D0D0)));
    let mut log = Vec::new();
    let mut best: Option<(Model, usize, f64)> = None;
    let (mut loss_sum, mut loss_steps) = (0.0, 0usize);
    for step in 1..=cfg.max_steps {
        let batch: Vec<&Prepared> = order.next_batch(cfg.batch_size).into_iter().map(|i| &train_set[i]).collect();
        let (loss, mut grads) = batch_loss_and_grad(&model, &batch, dropout.as_mut()).map_err(|e| diverged(step, e))?;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                step,
                detail: format!("training loss {loss}"),
            });
        }
        if let Some(c) = cfg.clip_norm {
            clip_global_norm(&mut grads, c);
        }
        opt.step(&mut model.params, &grads, cfg.lr);
        if !model.params.iter().all(|(_, t)| t.is_finite()) {
            return Err(Error::Divergence {
                step,
                detail: "parameters became non-finite".into(),
            });
        }
        loss_sum += loss;
        loss_steps += 1;
        if step % cfg.eval_interval == 0 || step == cfg.max_steps {
            let report = evaluate(&model, val_set).map_err(|e| diverged(step, e))?;
            let m = report.overall;
            log.push(LogRow {
                step,
                train_loss: loss_sum / loss_steps as f64,
                val_f1: m.f1,
                val_precision: m.precision,
            });
            loss_sum = 0.0;
            loss_steps = 0;
            if best.as_ref().map_or(true, |(_, _, f)| m.f1 > *f) {
                best = Some((model.clone(), step, m.f1));
            }
        }
    }
    let (best, best_step, best_val_f1) = best.expect("at least one evaluation");
    Ok(TrainOutcome {
        best,
        best_step,
        best_val_f1,
        last: model,
        log,
    })
}
