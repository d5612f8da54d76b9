//! Multi-seed experiment runner and the three ablation sweeps.
//!
//! Every run is keyed by `(model config, seed)`, so a sweep that revisits a
//! cell another sweep already trained reuses its result.

use std::collections::HashMap;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::metrics::MetricsReport;
use super::trainer::{evaluate, prepare, train, LogRow, Prepared, TrainConfig};
use crate::adaboost::{train_on_dataset, Ensemble};
use crate::error::{Error, Result};
use crate::features::{generate_synthetic_dataset, split, Dataset, GeneratorConfig};
use crate::model::{Model, ModelConfig, Variant};
use crate::tokenizer::Vocab;

/// Seed offset for the train/validation/test split, so it does not reuse the
/// generator's stream.
pub const SPLIT_SALT: u64 = 0x5EED_5EED;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSetup {
    pub data: GeneratorConfig,
    /// Train, validation and test fractions.
    pub split: [f64; 3],
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
}

/// Everything derived from one seed's dataset.
pub struct SeedData {
    pub train_ds: Dataset,
    pub val_ds: Dataset,
    pub test_ds: Dataset,
    pub vocab: Vocab,
    pub train: Vec<Prepared>,
    pub val: Vec<Prepared>,
    pub test: Vec<Prepared>,
    pub dataset_hash: String,
}

impl SeedData {
    pub fn build(setup: &ExperimentSetup, seed: u64) -> Result<SeedData> {
        if setup.model.variant.uses_features() && setup.model.d_features != setup.data.d_features {
            return Err(Error::Config(format!(
                "model d_features {} differs from data d_features {}",
                setup.model.d_features, setup.data.d_features
            )));
        }
        let full = generate_synthetic_dataset(&setup.data, seed)?;
        let dataset_hash = full.content_hash();
        let (train_ds, val_ds, test_ds) = split(&full, setup.split, seed ^ SPLIT_SALT)?;
        Self::from_splits(train_ds, val_ds, test_ds, &setup.model, dataset_hash)
    }

    /// Wraps existing splits; the vocabulary is built from the training queries.
    pub fn from_splits(
        train_ds: Dataset,
        val_ds: Dataset,
        test_ds: Dataset,
        model: &ModelConfig,
        dataset_hash: String,
    ) -> Result<SeedData> {
        for ds in [&train_ds, &val_ds, &test_ds] {
            if model.variant.uses_features() && ds.d_features != model.d_features {
                return Err(Error::Data(format!(
                    "{} split has d_features {}, model expects {}",
                    ds.split.as_str(),
                    ds.d_features,
                    model.d_features
                )));
            }
            if ds.is_empty() {
                return Err(Error::Data(format!("{} split is empty", ds.split.as_str())));
            }
        }
        let queries: Vec<&str> = train_ds.examples.iter().map(|e| e.query.as_str()).collect();
        let vocab = Vocab::build(&queries, model.vocab_size)?;
        let l = model.seq_len;
        Ok(SeedData {
            train: prepare(&train_ds, &vocab, l),
            val: prepare(&val_ds, &vocab, l),
            test: prepare(&test_ds, &vocab, l),
            train_ds,
            val_ds,
            test_ds,
            vocab,
            dataset_hash,
        })
    }
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub model: Model,
    pub test: MetricsReport,
    pub best_step: usize,
    pub best_val_f1: f64,
    pub log: Vec<LogRow>,
}

pub struct Runner {
    pub setup: ExperimentSetup,
    data: HashMap<u64, Rc<SeedData>>,
    runs: HashMap<(ModelConfig, u64), Rc<RunResult>>,
    boosts: HashMap<(usize, u64), Rc<(Ensemble, MetricsReport)>>,
}

/// Sequence length and vocabulary follow the data, so they are not part of
/// what a sweep may vary.
fn cache_key(cfg: &ModelConfig) -> Result<ModelConfig> {
    let mut c = cfg.validated()?;
    // A vsi model without memory tokens is the text-only model.
    if c.variant == Variant::Vsi && c.n_memory == 0 {
        c.variant = Variant::QueryOnly;
    }
    Ok(c)
}

impl Runner {
    pub fn new(setup: ExperimentSetup) -> Result<Runner> {
        setup.model.validated()?;
        setup.train.validate()?;
        if setup.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        Ok(Runner {
            setup,
            data: HashMap::new(),
            runs: HashMap::new(),
            boosts: HashMap::new(),
        })
    }

    pub fn seeds(&self) -> Vec<u64> {
        self.setup.seeds.clone()
    }

    /// Uses `data` for `seed` instead of generating it.
    pub fn insert_data(&mut self, seed: u64, data: SeedData) {
        self.data.insert(seed, Rc::new(data));
    }

    pub fn data(&mut self, seed: u64) -> Result<Rc<SeedData>> {
        if let Some(d) = self.data.get(&seed) {
            return Ok(d.clone());
        }
        let d = Rc::new(SeedData::build(&self.setup, seed)?);
        self.data.insert(seed, d.clone());
        Ok(d)
    }

    /// Trains `cfg` on `seed`'s data (init and batch order also use `seed`)
    /// and evaluates the best-validation checkpoint on the test split.
    pub fn run(&mut self, cfg: &ModelConfig, seed: u64) -> Result<Rc<RunResult>> {
        let key = (cache_key(cfg)?, seed);
        if let Some(r) = self.runs.get(&key) {
            return Ok(r.clone());
        }
        if cfg.seq_len != self.setup.model.seq_len || cfg.vocab_size != self.setup.model.vocab_size {
            return Err(Error::Config("seq_len and vocab_size must match the experiment".into()));
        }
        let data = self.data(seed)?;
        let model = Model::new(&key.0, seed)?;
        let tc = TrainConfig {
            seed,
            ..self.setup.train.clone()
        };
        let out = train(model, &tc, &data.train, &data.val)?;
        let test = evaluate(&out.best, &data.test)?;
        let r = Rc::new(RunResult {
            model: out.best,
            test,
            best_step: out.best_step,
            best_val_f1: out.best_val_f1,
            log: out.log,
        });
        self.runs.insert(key, r.clone());
        Ok(r)
    }

    pub fn adaboost(&mut self, n_estimators: usize, seed: u64) -> Result<Rc<(Ensemble, MetricsReport)>> {
        if let Some(r) = self.boosts.get(&(n_estimators, seed)) {
            return Ok(r.clone());
        }
        let data = self.data(seed)?;
        let e = train_on_dataset(&data.train_ds, n_estimators)?;
        let report = MetricsReport::from_predictions(
            data.test_ds
                .examples
                .iter()
                .map(|x| (x.label, e.predict_sparse(&x.features), x.subpop)),
        );
        let r = Rc::new((e, report));
        self.boosts.insert((n_estimators, seed), r.clone());
        Ok(r)
    }
}

/// Median; the mean of the two middle values for even counts.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of nothing");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub setting: String,
    pub variant: Variant,
    pub seed: u64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub cells: Vec<Cell>,
}

impl AblationTable {
    fn push(&mut self, setting: String, variant: Variant, seed: u64, r: &MetricsReport) {
        let m = &r.overall;
        self.cells.push(Cell {
            setting,
            variant,
            seed,
            f1: m.f1,
            precision: m.precision,
            recall: m.recall,
            accuracy: m.accuracy,
        });
    }

    /// `(setting, variant)` pairs in first-seen order.
    pub fn groups(&self) -> Vec<(String, Variant)> {
        let mut out: Vec<(String, Variant)> = Vec::new();
        for c in &self.cells {
            if !out.iter().any(|(s, v)| *s == c.setting && *v == c.variant) {
                out.push((c.setting.clone(), c.variant));
            }
        }
        out
    }

    pub fn f1s(&self, setting: &str, variant: Variant) -> Vec<f64> {
        self.cells
            .iter()
            .filter(|c| c.setting == setting && c.variant == variant)
            .map(|c| c.f1)
            .collect()
    }

    pub fn median_f1(&self, setting: &str, variant: Variant) -> f64 {
        median(&self.f1s(setting, variant))
    }

    /// One row per cell, then one `median` row per group.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("setting,variant,seed,f1,precision,recall,accuracy\n");
        for c in &self.cells {
            s.push_str(&format!(
                "{},{},{},{:.6},{:.6},{:.6},{:.6}\n",
                c.setting, c.variant, c.seed, c.f1, c.precision, c.recall, c.accuracy
            ));
        }
        for (setting, variant) in self.groups() {
            let pick = |f: fn(&Cell) -> f64| {
                median(
                    &self
                        .cells
                        .iter()
                        .filter(|c| c.setting == setting && c.variant == variant)
                        .map(f)
                        .collect::<Vec<_>>(),
                )
            };
            s.push_str(&format!(
                "{setting},{variant},median,{:.6},{:.6},{:.6},{:.6}\n",
                pick(|c| c.f1),
                pick(|c| c.precision),
                pick(|c| c.recall),
                pick(|c| c.accuracy)
            ));
        }
        s
    }
}

/// vsi with each memory-token count in `values`, everything else fixed.
pub fn ablate_memory(runner: &mut Runner, values: &[usize]) -> Result<AblationTable> {
    if let Some(&v) = values.iter().find(|&&v| v > crate::model::MAX_MEMORY_TOKENS) {
        return Err(Error::Config(format!("n_memory {v} is out of range")));
    }
    let mut t = AblationTable::default();
    for &n in values {
        let cfg = ModelConfig {
            variant: Variant::Vsi,
            n_memory: n,
            ..runner.setup.model.clone()
        };
        for seed in runner.seeds() {
            let r = runner.run(&cfg, seed)?;
            t.push(format!("n_memory={n}"), Variant::Vsi, seed, &r.test);
        }
    }
    Ok(t)
}

pub fn ablate_mlp_depth(runner: &mut Runner, depths: &[usize], variants: &[Variant]) -> Result<AblationTable> {
    let mut t = AblationTable::default();
    for &depth in depths {
        for &variant in variants {
            let cfg = ModelConfig {
                variant,
                n_mlp_layers: depth,
                ..runner.setup.model.clone()
            };
            for seed in runner.seeds() {
                let r = runner.run(&cfg, seed)?;
                t.push(format!("depth={depth}"), variant, seed, &r.test);
            }
        }
    }
    Ok(t)
}

/// Same sweep at several model sizes. Each entry names a size and gives its
/// config; only width, depth and head count may differ from the base.
pub fn ablate_size(runner: &mut Runner, sizes: &[(String, ModelConfig)], variants: &[Variant]) -> Result<AblationTable> {
    let base = &runner.setup.model;
    for (name, c) in sizes {
        let shape_only = ModelConfig {
            d_model: base.d_model,
            n_layers: base.n_layers,
            d_ff: base.d_ff,
            n_heads: base.n_heads,
            variant: base.variant,
            ..c.clone()
        };
        if shape_only != *base {
            return Err(Error::Config(format!(
                "size {name} differs from the base config in more than d_model, n_layers, d_ff and n_heads"
            )));
        }
    }
    let mut t = AblationTable::default();
    for (name, c) in sizes {
        for &variant in variants {
            let cfg = c.with_variant(variant);
            for seed in runner.seeds() {
                let r = runner.run(&cfg, seed)?;
                t.push(name.clone(), variant, seed, &r.test);
            }
        }
    }
    Ok(t)
}

/// `(median F1(vsi) - median F1(query_only)) / median F1(query_only)` for each
/// size in the table.
pub fn relative_gains(t: &AblationTable) -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for (setting, _) in t.groups() {
        if out.iter().any(|(s, _): &(String, f64)| *s == setting) {
            continue;
        }
        let q = t.median_f1(&setting, Variant::QueryOnly);
        let v = t.median_f1(&setting, Variant::Vsi);
        out.push((setting, if q > 0.0 { (v - q) / q } else { f64::INFINITY }));
    }
    out
}

pub fn gains_to_csv(gains: &[(String, f64)]) -> String {
    let mut s = String::from("setting,relative_f1_gain\n");
    for (k, g) in gains {
        s.push_str(&format!("{k},{g:.6}\n"));
    }
    s
}
