//! Run manifests: enough to rerun a command and to check that the rerun
//! reproduced every output byte for byte.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{io_err, CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum AblationKind {
    Memory,
    MlpDepth,
    Size,
}

impl AblationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AblationKind::Memory => "memory",
            AblationKind::MlpDepth => "mlp-depth",
            AblationKind::Size => "size",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Invocation {
    GenData { seed: u64, size: usize },
    Train { seed: Option<u64> },
    Ablate { kind: AblationKind },
    Eval { checkpoint: PathBuf, data: PathBuf, out_name: String },
}

impl Invocation {
    pub fn file_name(&self) -> String {
        match self {
            Invocation::GenData { .. } => "manifest.gen-data.json".into(),
            Invocation::Train { seed: Some(s) } => format!("manifest.train.seed-{s}.json"),
            Invocation::Train { seed: None } => "manifest.train.json".into(),
            Invocation::Ablate { kind } => format!("manifest.ablate-{}.json", kind.as_str()),
            Invocation::Eval { out_name, .. } => format!("manifest.eval.{out_name}.json"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub invocation: Invocation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<ExperimentConfig>,
    pub seeds: Vec<u64>,
    /// Content hash of every dataset read or generated, by name.
    pub dataset_hashes: BTreeMap<String, String>,
    pub code_version: String,
    pub code_version_hash: String,
    /// SHA-256 of every output, keyed by path relative to the run root.
    pub outputs: BTreeMap<String, String>,
}

/// What a command produced, relative to its root directory.
#[derive(Debug, Default)]
pub struct RunRecord {
    pub seeds: Vec<u64>,
    pub outputs: Vec<PathBuf>,
    pub dataset_hashes: BTreeMap<String, String>,
}

pub fn hash_file(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(vsi::sha256_hex(&bytes))
}

pub fn hash_outputs(root: &Path, outputs: &[PathBuf]) -> CliResult<BTreeMap<String, String>> {
    outputs
        .iter()
        .map(|rel| Ok((rel.to_string_lossy().replace('\\', "/"), hash_file(&root.join(rel))?)))
        .collect()
}

impl Manifest {
    pub fn build(invocation: Invocation, config: Option<&ExperimentConfig>, root: &Path, record: &RunRecord) -> CliResult<Manifest> {
        Ok(Manifest {
            invocation,
            config: config.cloned(),
            seeds: record.seeds.clone(),
            dataset_hashes: record.dataset_hashes.clone(),
            code_version: vsi::CODE_VERSION.to_string(),
            code_version_hash: vsi::code_version_hash(),
            outputs: hash_outputs(root, &record.outputs)?,
        })
    }

    pub fn write(&self, root: &Path) -> CliResult<PathBuf> {
        let path = root.join(self.invocation.file_name());
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::other(e.to_string()))? + "\n";
        std::fs::write(&path, text).map_err(|e| io_err(&path, e))?;
        Ok(path)
    }

    pub fn read(path: &Path) -> CliResult<Manifest> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
    }
}

/// Differences between a recorded and a replayed manifest.
pub fn compare(recorded: &Manifest, replayed: &Manifest) -> Vec<String> {
    let mut diffs = Vec::new();
    if recorded.code_version_hash != replayed.code_version_hash {
        diffs.push(format!(
            "code version differs: recorded {}, running {}",
            recorded.code_version, replayed.code_version
        ));
    }
    for (k, v) in &recorded.dataset_hashes {
        if replayed.dataset_hashes.get(k) != Some(v) {
            diffs.push(format!("dataset {k} differs"));
        }
    }
    for (k, v) in &recorded.outputs {
        match replayed.outputs.get(k) {
            Some(w) if w == v => {}
            Some(_) => diffs.push(format!("output {k} differs")),
            None => diffs.push(format!("output {k} was not produced")),
        }
    }
    for k in replayed.outputs.keys().filter(|k| !recorded.outputs.contains_key(*k)) {
        diffs.push(format!("unexpected output {k}"));
    }
    diffs
}
