use std::fs;
use std::path::{Path, PathBuf};

use vsi::features::{densify, generate_synthetic_dataset, split, Dataset, SparseFeatureVector, Subpopulation};
use vsi::model::{checkpoint, Model, Variant};
use vsi::tokenizer::{encode, Vocab};
use vsi::train::{
    ablate_memory, ablate_mlp_depth, ablate_size, evaluate, gains_to_csv, log_to_csv, prepare, relative_gains, train,
    ExperimentSetup, Runner, SeedData, TrainConfig, SPLIT_SALT,
};

use crate::config::ExperimentConfig;
use crate::error::{io_err, CliError, CliResult};
use crate::manifest::{AblationKind, RunRecord};

fn write(root: &Path, rel: impl Into<PathBuf>, contents: &str, rec: &mut RunRecord) -> CliResult<()> {
    let rel = rel.into();
    let path = root.join(&rel);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(&path, contents).map_err(|e| io_err(&path, e))?;
    rec.outputs.push(rel);
    Ok(())
}

fn create_root(root: &Path) -> CliResult<()> {
    fs::create_dir_all(root).map_err(|e| io_err(root, e))
}

fn subpop_counts(ds: &Dataset) -> String {
    Subpopulation::ALL
        .iter()
        .map(|s| format!("{}={}", s.as_str(), ds.count_subpop(*s)))
        .collect::<Vec<_>>()
        .join(" ")
}

// ---------------------------------------------------------------------------

pub fn gen_data(cfg: &ExperimentConfig, seed: u64, size: usize, root: &Path) -> CliResult<RunRecord> {
    let gen = cfg.data.generator(size)?;
    let full = generate_synthetic_dataset(&gen, seed)?;
    let (train_ds, val_ds, test_ds) = split(&full, cfg.data.split, seed ^ SPLIT_SALT)?;
    create_root(root)?;
    let mut rec = RunRecord {
        seeds: vec![seed],
        ..Default::default()
    };
    rec.dataset_hashes.insert("full".into(), full.content_hash());
    for (name, ds) in [("full", &full), ("train", &train_ds), ("validation", &val_ds), ("test", &test_ds)] {
        let file = PathBuf::from(format!("{name}.jsonl"));
        ds.save(root.join(&file), &ds.header(Some(seed), Some(&gen)))?;
        rec.outputs.push(vsi::features::header_path(&file));
        rec.outputs.push(file);
        println!("{name:<10} {:>6} examples  {}", ds.len(), subpop_counts(ds));
    }
    Ok(rec)
}

// ---------------------------------------------------------------------------

fn load_split(path: &Path) -> CliResult<(Dataset, String)> {
    let (ds, _) = Dataset::load(path)?;
    let hash = ds.content_hash();
    Ok((ds, hash))
}

/// The data a seed trains on: generated, or read from the configured files.
fn seed_data(cfg: &ExperimentConfig, setup: Option<&ExperimentSetup>, seed: u64, rec: &mut RunRecord) -> CliResult<SeedData> {
    match (&cfg.dataset, setup) {
        (Some(paths), _) => {
            let (tr, h1) = load_split(&paths.train)?;
            let (va, h2) = load_split(&paths.validation)?;
            let (te, h3) = load_split(&paths.test)?;
            rec.dataset_hashes.insert("train".into(), h1.clone());
            rec.dataset_hashes.insert("validation".into(), h2);
            rec.dataset_hashes.insert("test".into(), h3);
            Ok(SeedData::from_splits(tr, va, te, &cfg.model, h1)?)
        }
        (None, Some(setup)) => {
            let d = SeedData::build(setup, seed)?;
            rec.dataset_hashes.insert(format!("seed-{seed}"), d.dataset_hash.clone());
            Ok(d)
        }
        (None, None) => unreachable!("a config without files always has a setup"),
    }
}

pub fn train_cmd(cfg: &ExperimentConfig, only_seed: Option<u64>, root: &Path) -> CliResult<RunRecord> {
    let setup = cfg.setup()?;
    let seeds = only_seed.map_or_else(|| cfg.seeds.clone(), |s| vec![s]);
    create_root(root)?;
    let mut rec = RunRecord {
        seeds: seeds.clone(),
        ..Default::default()
    };
    for seed in seeds {
        let data = seed_data(cfg, setup.as_ref(), seed, &mut rec)?;
        let model = Model::new(&cfg.model, seed)?;
        let tc = TrainConfig {
            seed,
            ..cfg.train.clone()
        };
        let out = train(model, &tc, &data.train, &data.val)?;
        let report = evaluate(&out.best, &data.test)?;
        let dir = PathBuf::from(format!("seed-{seed}")).join(out.best.config.variant.as_str());
        let ckpt = dir.join("model.json");
        let abs = root.join(&ckpt);
        checkpoint::save(&out.best, &abs)?;
        rec.outputs.push(ckpt.clone());
        rec.outputs.push(checkpoint::blob_path(&ckpt));
        write(root, dir.join("vocab.txt"), &data.vocab.to_text(), &mut rec)?;
        write(root, dir.join("train_log.csv"), &log_to_csv(&out.log), &mut rec)?;
        let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::other(e.to_string()))? + "\n";
        write(root, dir.join("metrics.json"), &json, &mut rec)?;
        write(root, dir.join("metrics.txt"), &report.to_table(), &mut rec)?;
        println!(
            "seed {seed} {}: best step {} val F1 {:.6}; test F1 {:.6} precision {:.6}",
            out.best.config.variant, out.best_step, out.best_val_f1, report.overall.f1, report.overall.precision
        );
    }
    Ok(rec)
}

// ---------------------------------------------------------------------------

pub fn ablate(cfg: &ExperimentConfig, kind: AblationKind, root: &Path) -> CliResult<RunRecord> {
    if kind == AblationKind::Size && cfg.ablation.sizes.is_empty() {
        return Err(CliError::config("the size ablation needs at least one [[ablation.sizes]] entry"));
    }
    let mut rec = RunRecord {
        seeds: cfg.seeds.clone(),
        ..Default::default()
    };
    let setup = cfg.setup()?;
    let mut runner = match &setup {
        Some(setup) => {
            let mut r = Runner::new(setup.clone())?;
            for &seed in &cfg.seeds {
                let d = r.data(seed)?;
                rec.dataset_hashes.insert(format!("seed-{seed}"), d.dataset_hash.clone());
            }
            r
        }
        None => {
            // File-backed data: the generator section is never consulted.
            let mut r = Runner::new(ExperimentSetup {
                data: vsi::features::GeneratorConfig::default(),
                split: cfg.data.split,
                model: cfg.model.clone(),
                train: cfg.train.clone(),
                seeds: cfg.seeds.clone(),
            })?;
            for &seed in &cfg.seeds {
                let d = seed_data(cfg, None, seed, &mut rec)?;
                r.insert_data(seed, d);
            }
            r
        }
    };
    create_root(root)?;
    let dir = PathBuf::from("ablation");
    match kind {
        AblationKind::Memory => {
            let t = ablate_memory(&mut runner, &cfg.ablation.memory)?;
            write(root, dir.join("memory.csv"), &t.to_csv(), &mut rec)?;
            print!("{}", t.to_csv());
        }
        AblationKind::MlpDepth => {
            let t = ablate_mlp_depth(&mut runner, &cfg.ablation.mlp_depth, &cfg.ablation.depth_variants)?;
            write(root, dir.join("mlp-depth.csv"), &t.to_csv(), &mut rec)?;
            print!("{}", t.to_csv());
        }
        AblationKind::Size => {
            let sizes: Vec<(String, vsi::model::ModelConfig)> =
                cfg.ablation.sizes.iter().map(|s| (s.name.clone(), cfg.size_config(s))).collect();
            let t = ablate_size(&mut runner, &sizes, &cfg.ablation.size_variants)?;
            write(root, dir.join("size.csv"), &t.to_csv(), &mut rec)?;
            print!("{}", t.to_csv());
            let has_both = [Variant::QueryOnly, Variant::Vsi]
                .iter()
                .all(|v| cfg.ablation.size_variants.contains(v));
            if has_both {
                let g = gains_to_csv(&relative_gains(&t));
                write(root, dir.join("size-gain.csv"), &g, &mut rec)?;
                print!("{g}");
            }
        }
    }
    Ok(rec)
}

// ---------------------------------------------------------------------------

/// Accepts either the manifest file or the directory that holds it.
pub fn resolve_checkpoint(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("model.json")
    } else {
        path.to_path_buf()
    }
}

pub fn load_checkpoint(path: &Path) -> CliResult<(Model, Vocab)> {
    let manifest = resolve_checkpoint(path);
    if !manifest.is_file() {
        return Err(CliError::data(format!("checkpoint {} does not exist", manifest.display())));
    }
    let model = checkpoint::load(&manifest)?;
    let vocab = Vocab::load(manifest.with_file_name("vocab.txt"))?;
    Ok((model, vocab))
}

pub fn eval(checkpoint_path: &Path, data: &Path, root: &Path, out_name: &str) -> CliResult<RunRecord> {
    let (model, vocab) = load_checkpoint(checkpoint_path)?;
    let (ds, _) = Dataset::load(data)?;
    if model.config.variant.uses_features() && ds.d_features != model.config.d_features {
        return Err(CliError::data(format!(
            "dataset d_features {} does not match the checkpoint's {}",
            ds.d_features, model.config.d_features
        )));
    }
    let examples = prepare(&ds, &vocab, model.config.seq_len);
    let report = evaluate(&model, &examples)?;
    create_root(root)?;
    let mut rec = RunRecord::default();
    rec.dataset_hashes.insert("data".into(), ds.content_hash());
    rec.dataset_hashes.insert("checkpoint".into(), crate::manifest::hash_file(&checkpoint::blob_path(&resolve_checkpoint(checkpoint_path)))?);
    let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::other(e.to_string()))? + "\n";
    write(root, format!("{out_name}.json"), &json, &mut rec)?;
    write(root, format!("{out_name}.txt"), &report.to_table(), &mut rec)?;
    print!("{}", report.to_table());
    Ok(rec)
}

// ---------------------------------------------------------------------------

pub struct Prediction {
    pub class: u8,
    pub probability: f64,
}

pub fn predict(checkpoint_path: &Path, query: &str, features: Option<&str>) -> CliResult<Prediction> {
    let (model, vocab) = load_checkpoint(checkpoint_path)?;
    let cfg = &model.config;
    let dense = if cfg.variant.uses_features() {
        let entries: Vec<(usize, f64)> = match features {
            Some(text) => serde_json::from_str(text)
                .map_err(|e| CliError::data(format!("--features must be JSON [[index, score], ...]: {e}")))?,
            None => Vec::new(),
        };
        let sv = SparseFeatureVector::from_unsorted(entries, cfg.d_features)?;
        Some(densify(&sv))
    } else {
        if features.is_some() {
            eprintln!("warning: {} model does not read dense features; --features ignored", cfg.variant);
        }
        None
    };
    let tokens = encode(query, &vocab, cfg.seq_len);
    let probs = model.probabilities(&tokens, dense.as_ref())?;
    let class = model.predict(&tokens, dense.as_ref())?;
    Ok(Prediction {
        class,
        probability: probs[class as usize],
    })
}
