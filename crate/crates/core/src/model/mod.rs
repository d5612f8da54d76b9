//! The encoder classifier and its two baselines.

pub mod checkpoint;
pub mod config;
pub mod forward;
pub mod params;

#[cfg(test)]
mod tests;

pub use config::{ModelConfig, PoolMode, Variant, MAX_MEMORY_TOKENS};
pub use forward::Dropout;
pub use params::{init_params, param_count, Params};

use crate::autodiff::Graph;
use crate::error::Result;
use crate::tensor::Tensor;
use crate::tokenizer::TokenSequence;

/// A validated config together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Params,
}

impl Model {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Model> {
        let config = config.validated()?;
        let params = init_params(&config, seed)?;
        Ok(Model { config, params })
    }

    pub fn from_params(config: &ModelConfig, params: Params) -> Result<Model> {
        let config = config.validated()?;
        params::check_params(&config, &params)?;
        Ok(Model { config, params })
    }

    /// Class logits for one example. `features` is the dense vector of length
    /// `d_features`; it is ignored by the text-only variant.
    pub fn logits(&self, tokens: &TokenSequence, features: Option<&Tensor>) -> Result<Vec<f64>> {
        self.run(tokens, features, true)
    }

    /// Same result as [`Model::logits`], computed over every padded position.
    pub fn logits_padded(&self, tokens: &TokenSequence, features: Option<&Tensor>) -> Result<Vec<f64>> {
        self.run(tokens, features, false)
    }

    fn run(&self, tokens: &TokenSequence, features: Option<&Tensor>, compact: bool) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let out = forward::example_logits(&mut g, tokens, features, &self.config, &self.params, compact, &mut None)?;
        Ok(g.value(out).data().to_vec())
    }

    /// Softmax over the logits.
    pub fn probabilities(&self, tokens: &TokenSequence, features: Option<&Tensor>) -> Result<Vec<f64>> {
        let z = self.logits(tokens, features)?;
        let lse = crate::autodiff::log_sum_exp(&z);
        Ok(z.iter().map(|v| (v - lse).exp()).collect())
    }

    /// Index of the largest logit; ties go to class 0.
    pub fn predict(&self, tokens: &TokenSequence, features: Option<&Tensor>) -> Result<u8> {
        let z = self.logits(tokens, features)?;
        Ok(u8::from(z[1] > z[0]))
    }
}
