use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::config::{ModelConfig, Variant};
use crate::autodiff::NamedTensors;
use crate::error::Result;
use crate::tensor::Tensor;

pub type Params = NamedTensors;

pub const INIT_STD: f64 = 0.02;

/// Parameter names, grouped so the forward pass can look them up.
pub mod names {
    pub const TOKEN_EMBEDDING: &str = "embed.token";
    pub const POSITION_EMBEDDING: &str = "embed.position";
    pub const FINAL_NORM_GAIN: &str = "final_norm.gain";
    pub const FINAL_NORM_BIAS: &str = "final_norm.bias";
    pub const HEAD_OUTPUT_WEIGHT: &str = "head.output.weight";
    pub const HEAD_OUTPUT_BIAS: &str = "head.output.bias";

    pub fn layer(l: usize, leaf: &str) -> String {
        format!("layers.{l}.{leaf}")
    }

    pub fn memory_weight(i: usize) -> String {
        format!("memory.{i}.weight")
    }

    pub fn memory_bias(i: usize) -> String {
        format!("memory.{i}.bias")
    }

    pub fn head_hidden_weight(j: usize) -> String {
        format!("head.hidden.{j}.weight")
    }

    pub fn head_hidden_bias(j: usize) -> String {
        format!("head.hidden.{j}.bias")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitKind {
    Normal,
    Zeros,
    Ones,
}

/// Every tensor the config implies, with its shape and initializer.
pub fn param_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, InitKind)> {
    use InitKind::*;
    let d = cfg.d_model;
    let mut v = vec![
        (names::TOKEN_EMBEDDING.to_string(), vec![cfg.vocab_size, d], Normal),
        (names::POSITION_EMBEDDING.to_string(), vec![cfg.seq_len, d], Normal),
    ];
    for l in 0..cfg.n_layers {
        v.push((names::layer(l, "attn_norm.gain"), vec![d], Ones));
        v.push((names::layer(l, "attn_norm.bias"), vec![d], Zeros));
        for p in ["query", "key", "value", "output"] {
            v.push((names::layer(l, &format!("attn.{p}")), vec![d, d], Normal));
        }
        v.push((names::layer(l, "ffn_norm.gain"), vec![d], Ones));
        v.push((names::layer(l, "ffn_norm.bias"), vec![d], Zeros));
        v.push((names::layer(l, "ffn.gate"), vec![d, cfg.d_ff], Normal));
        v.push((names::layer(l, "ffn.linear"), vec![d, cfg.d_ff], Normal));
        v.push((names::layer(l, "ffn.output"), vec![cfg.d_ff, d], Normal));
    }
    v.push((names::FINAL_NORM_GAIN.to_string(), vec![d], Ones));
    v.push((names::FINAL_NORM_BIAS.to_string(), vec![d], Zeros));
    if cfg.variant == Variant::Vsi {
        for i in 0..cfg.n_memory {
            v.push((names::memory_weight(i), vec![cfg.d_features, d], Normal));
            v.push((names::memory_bias(i), vec![d], Zeros));
        }
    }
    for j in 0..cfg.n_mlp_layers {
        let input = if j == 0 { cfg.classifier_input() } else { d };
        v.push((names::head_hidden_weight(j), vec![input, d], Normal));
        v.push((names::head_hidden_bias(j), vec![d], Zeros));
    }
    v.push((names::HEAD_OUTPUT_WEIGHT.to_string(), vec![d, cfg.n_class], Normal));
    v.push((names::HEAD_OUTPUT_BIAS.to_string(), vec![cfg.n_class], Zeros));
    v
}

/// Number of scalar parameters the config implies.
pub fn param_count(cfg: &ModelConfig) -> usize {
    param_specs(cfg).iter().map(|(_, s, _)| s.iter().product::<usize>()).sum()
}

fn tensor_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 32];
    bytes.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(bytes)
}

/// Weights ~ Normal(0, 0.02^2) truncated at two standard deviations; biases
/// zero; layer-norm gains one. Each tensor draws from its own stream keyed by
/// `(seed, name)`, so adding or removing a tensor leaves the others intact.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<Params> {
    let cfg = cfg.validated()?;
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut params = Params::new();
    for (name, shape, kind) in param_specs(&cfg) {
        let n: usize = shape.iter().product();
        let data = match kind {
            InitKind::Zeros => vec![0.0; n],
            InitKind::Ones => vec![1.0; n],
            InitKind::Normal => {
                let mut rng = tensor_rng(seed, &name);
                (0..n)
                    .map(|_| loop {
                        let x: f64 = normal.sample(&mut rng);
                        if x.abs() <= 2.0 * INIT_STD {
                            break x;
                        }
                    })
                    .collect()
            }
        };
        params.insert(name, Tensor::new(shape, data)?);
    }
    Ok(params)
}

/// Checks that `params` holds exactly the tensors `cfg` implies.
pub fn check_params(cfg: &ModelConfig, params: &Params) -> Result<()> {
    let specs = param_specs(cfg);
    if specs.len() != params.len() {
        return Err(crate::Error::Config(format!(
            "expected {} tensors, found {}",
            specs.len(),
            params.len()
        )));
    }
    for (name, shape, _) in specs {
        match params.get(&name) {
            Some(t) if t.shape() == shape.as_slice() && t.is_finite() => {}
            Some(t) => {
                return Err(crate::Error::Config(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )))
            }
            None => return Err(crate::Error::Config(format!("missing tensor {name}"))),
        }
    }
    Ok(())
}
