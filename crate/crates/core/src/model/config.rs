use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_MEMORY_TOKENS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Text only; dense features are never read.
    QueryOnly,
    /// Dense features concatenated to the pooled encoder output.
    LateFusion,
    /// Dense features projected into memory tokens inside the encoder.
    Vsi,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::QueryOnly => "query_only",
            Variant::LateFusion => "late_fusion",
            Variant::Vsi => "vsi",
        }
    }

    pub fn uses_features(self) -> bool {
        self != Variant::QueryOnly
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which encoder positions the pooling step averages over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    /// Every unpadded query position plus every memory position.
    #[default]
    AllPositions,
    /// Unpadded query positions only.
    QueryPositions,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub d_features: usize,
    pub n_memory: usize,
    pub n_class: usize,
    pub n_mlp_layers: usize,
    pub pool: PoolMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::Vsi,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            vocab_size: 256,
            seq_len: 16,
            d_features: 512,
            n_memory: 1,
            n_class: 2,
            n_mlp_layers: 1,
            pool: PoolMode::AllPositions,
        }
    }
}

impl ModelConfig {
    /// Checks the invariants and returns the normalized config: variants
    /// without memory tokens get `n_memory = 0`.
    pub fn validated(&self) -> Result<ModelConfig> {
        let mut c = self.clone();
        if c.variant != Variant::Vsi {
            c.n_memory = 0;
        }
        let fail = |m: String| Err(Error::Config(m));
        if c.n_heads == 0 || c.d_model == 0 || c.d_model % c.n_heads != 0 {
            return fail(format!("d_model {} must be a positive multiple of n_heads {}", c.d_model, c.n_heads));
        }
        if c.n_layers == 0 || c.d_ff == 0 || c.seq_len == 0 {
            return fail("n_layers, d_ff and seq_len must be positive".into());
        }
        if c.vocab_size < 2 {
            return fail(format!("vocab_size {} leaves no room for PAD/UNK", c.vocab_size));
        }
        if c.n_memory > MAX_MEMORY_TOKENS {
            return fail(format!("n_memory {} exceeds {MAX_MEMORY_TOKENS}", c.n_memory));
        }
        if !(1..=3).contains(&c.n_mlp_layers) {
            return fail(format!("n_mlp_layers {} must be 1, 2 or 3", c.n_mlp_layers));
        }
        if c.n_class != 2 {
            return fail(format!("n_class must be 2, got {}", c.n_class));
        }
        if c.variant.uses_features() && c.d_features == 0 {
            return fail(format!("{} needs d_features > 0", c.variant));
        }
        Ok(c)
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Width of the first classifier layer's input.
    pub fn classifier_input(&self) -> usize {
        match self.variant {
            Variant::LateFusion => self.d_model + self.d_features,
            _ => self.d_model,
        }
    }

    pub fn with_variant(&self, variant: Variant) -> ModelConfig {
        ModelConfig {
            variant,
            ..self.clone()
        }
    }
}
