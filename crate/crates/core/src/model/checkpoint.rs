//! On-disk model format: a JSON manifest next to a little-endian `f64` blob.
//!
//! `model.json` holds the config and, per tensor, its name, shape and byte
//! offset into `model.bin`. Tensors are written in name order, so saving the
//! same parameters twice produces identical bytes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::params::{check_params, Params};
use super::Model;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT: &str = "vsi-checkpoint/1";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    config: ModelConfig,
    blob: String,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

/// Path of the blob that accompanies a manifest path.
pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

pub fn save(model: &Model, manifest_path: impl AsRef<Path>) -> Result<()> {
    let manifest_path = manifest_path.as_ref();
    let blob = blob_path(manifest_path);
    let mut bytes = Vec::with_capacity(model.params.scalar_count() * 8);
    let mut tensors = Vec::with_capacity(model.params.len());
    for (name, t) in model.params.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: bytes.len(),
        });
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT.to_string(),
        config: model.config.clone(),
        blob: blob
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        tensors,
    };
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    if let Some(dir) = manifest_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(&blob, &bytes).map_err(|e| Error::io(&blob, e))?;
    fs::write(manifest_path, json).map_err(|e| Error::io(manifest_path, e))?;
    Ok(())
}

pub fn load(manifest_path: impl AsRef<Path>) -> Result<Model> {
    let manifest_path = manifest_path.as_ref();
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format != FORMAT {
        return Err(Error::Data(format!("unsupported checkpoint format {:?}", manifest.format)));
    }
    let blob = manifest_path.with_file_name(&manifest.blob);
    let bytes = fs::read(&blob).map_err(|e| Error::io(&blob, e))?;
    let mut params = Params::new();
    for entry in manifest.tensors {
        let n: usize = entry.shape.iter().product();
        let end = entry.offset + n * 8;
        if end > bytes.len() || entry.offset % 8 != 0 {
            return Err(Error::Data(format!("tensor {} lies outside the blob", entry.name)));
        }
        let data = bytes[entry.offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        params.insert(entry.name, Tensor::new(entry.shape, data)?);
    }
    let config = manifest.config.validated()?;
    check_params(&config, &params)?;
    Ok(Model { config, params })
}
