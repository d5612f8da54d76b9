//! `vsi`: generate data, train and evaluate models, run ablations.

mod commands;
mod config;
mod error;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::ExperimentConfig;
use error::{CliError, CliResult};
use manifest::{compare, AblationKind, Invocation, Manifest};

#[derive(Parser)]
#[command(name = "vsi", version, about = "Query intent classification with dense-feature memory tokens")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its train/validation/test splits.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Defaults to the first seed in the config (0 without one).
        #[arg(long)]
        seed: Option<u64>,
        /// Total number of examples; defaults to `data.total`.
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the configured model variant for each seed (or just `--seed`).
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on a JSONL dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Metrics JSON path; defaults to `eval.json` next to the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one ablation sweep over the configured seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        kind: AblationKind,
    },
    /// Classify a single query.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        query: String,
        /// Sparse features as JSON pairs, e.g. `[[0, 0.9], [3, 0.5]]`.
        #[arg(long)]
        features: Option<String>,
    },
    /// Rerun the command recorded in a manifest and compare every output.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
    },
}

fn absolute(p: &Path) -> CliResult<PathBuf> {
    std::fs::canonicalize(p).map_err(|e| CliError::data(format!("{}: {e}", p.display())))
}

fn gen_data_config(config: Option<&Path>, out: &Path) -> CliResult<ExperimentConfig> {
    match config {
        Some(p) => ExperimentConfig::load(p),
        None => ExperimentConfig::parse(&format!("output_dir = {:?}\n", out.display().to_string())),
    }
}

/// Runs `invocation` with outputs under `root` and returns its manifest.
fn execute(invocation: &Invocation, cfg: Option<&ExperimentConfig>, root: &Path) -> CliResult<Manifest> {
    let rec = match invocation {
        Invocation::GenData { seed, size } => commands::gen_data(cfg.expect("config"), *seed, *size, root)?,
        Invocation::Train { seed } => commands::train_cmd(cfg.expect("config"), *seed, root)?,
        Invocation::Ablate { kind } => commands::ablate(cfg.expect("config"), *kind, root)?,
        Invocation::Eval {
            checkpoint,
            data,
            out_name,
        } => commands::eval(checkpoint, data, root, out_name)?,
    };
    Manifest::build(invocation.clone(), cfg, root, &rec)
}

fn run_and_record(invocation: Invocation, cfg: Option<&ExperimentConfig>, root: &Path) -> CliResult<()> {
    let m = execute(&invocation, cfg, root)?;
    let path = m.write(root)?;
    eprintln!("manifest written to {}", path.display());
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData {
            config,
            seed,
            size,
            out,
        } => {
            let cfg = gen_data_config(config.as_deref(), &out)?;
            let seed = seed.unwrap_or(cfg.seeds[0]);
            let size = size.unwrap_or(cfg.data.total);
            // Surface generator errors before anything is written.
            cfg.data.generator(size)?;
            run_and_record(Invocation::GenData { seed, size }, Some(&cfg), &out)
        }
        Command::Train { config, seed } => {
            let cfg = ExperimentConfig::load(&config)?;
            let root = cfg.output_dir.clone();
            run_and_record(Invocation::Train { seed }, Some(&cfg), &root)
        }
        Command::Ablate { config, kind } => {
            let cfg = ExperimentConfig::load(&config)?;
            let root = cfg.output_dir.clone();
            run_and_record(Invocation::Ablate { kind }, Some(&cfg), &root)
        }
        Command::Eval { checkpoint, data, out } => {
            let ckpt = commands::resolve_checkpoint(&checkpoint);
            let out = out.unwrap_or_else(|| ckpt.with_file_name("eval.json"));
            let root = out.parent().map(Path::to_path_buf).unwrap_or_default();
            let out_name = out
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .ok_or_else(|| CliError::config("--out needs a file name"))?;
            let invocation = Invocation::Eval {
                checkpoint: absolute(&ckpt)?,
                data: absolute(&data)?,
                out_name,
            };
            run_and_record(invocation, None, &root)
        }
        Command::Predict {
            checkpoint,
            query,
            features,
        } => {
            let p = commands::predict(&checkpoint, &query, features.as_deref())?;
            println!("class={} probability={:.6}", p.class, p.probability);
            Ok(())
        }
        Command::Replay { manifest } => {
            let recorded = Manifest::read(&manifest)?;
            let tmp = tempfile::tempdir().map_err(|e| error::io_err(Path::new("temporary directory"), e))?;
            let cfg = recorded.config.clone().map(|c| ExperimentConfig {
                output_dir: tmp.path().to_path_buf(),
                ..c
            });
            let replayed = execute(&recorded.invocation, cfg.as_ref(), tmp.path())?;
            let diffs = compare(&recorded, &replayed);
            if diffs.is_empty() {
                println!("replay reproduced all {} outputs", recorded.outputs.len());
                Ok(())
            } else {
                for d in &diffs {
                    println!("mismatch: {d}");
                }
                Err(CliError::other(format!("replay found {} mismatch(es)", diffs.len())))
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
