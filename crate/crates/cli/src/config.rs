//! Experiment configuration file (TOML).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vsi::features::GeneratorConfig;
use vsi::model::{ModelConfig, Variant};
use vsi::train::{ExperimentSetup, TrainConfig};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root of every artifact this config produces.
    pub output_dir: PathBuf,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub data: DataSection,
    /// Pre-built splits. When absent, data is generated per seed from `[data]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<DatasetPaths>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub ablation: AblationSection,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub total: usize,
    /// Fractions of text-decidable, dense-only, both and noise examples.
    pub mix: [f64; 4],
    /// Train, validation and test fractions.
    pub split: [f64; 3],
    pub positive_rate: f64,
    pub d_features: usize,
    pub location_rate: f64,
    pub noise_features: (usize, usize),
}

impl Default for DataSection {
    fn default() -> Self {
        let g = GeneratorConfig::default();
        DataSection {
            total: g.total,
            mix: [0.5, 0.3, 0.2, 0.0],
            split: [0.8, 0.1, 0.1],
            positive_rate: g.positive_rate,
            d_features: g.d_features,
            location_rate: g.location_rate,
            noise_features: g.noise_features,
        }
    }
}

impl DataSection {
    pub fn generator(&self, total: usize) -> CliResult<GeneratorConfig> {
        let mut g = GeneratorConfig::from_mix(total, self.mix)?;
        g.positive_rate = self.positive_rate;
        g.d_features = self.d_features;
        g.location_rate = self.location_rate;
        g.noise_features = self.noise_features;
        g.validate()?;
        Ok(g)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetPaths {
    pub train: PathBuf,
    pub validation: PathBuf,
    pub test: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    pub memory: Vec<usize>,
    pub mlp_depth: Vec<usize>,
    pub depth_variants: Vec<Variant>,
    pub size_variants: Vec<Variant>,
    /// Named model shapes for the size sweep, in report order.
    pub sizes: Vec<SizeSpec>,
}

impl Default for AblationSection {
    fn default() -> Self {
        AblationSection {
            memory: vec![0, 1, 2, 3, 4],
            mlp_depth: vec![1, 2, 3],
            depth_variants: vec![Variant::LateFusion, Variant::Vsi],
            size_variants: vec![Variant::QueryOnly, Variant::Vsi],
            sizes: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SizeSpec {
    pub name: String,
    pub d_model: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub n_heads: usize,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> CliResult<ExperimentConfig> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| CliError::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<ExperimentConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError {
            message: format!("{}: {}", path.display(), e.message),
            ..e
        })
    }

    /// Checks everything that can be checked without reading data.
    pub fn validate(&self) -> CliResult<()> {
        if self.seeds.is_empty() {
            return Err(CliError::config("seeds must not be empty"));
        }
        self.model.validated()?;
        self.train.validate()?;
        if self.train.lr <= 0.0 {
            return Err(CliError::config("train.lr must be positive"));
        }
        if let Some(d) = &self.dataset {
            for p in [&d.train, &d.validation, &d.test] {
                if !p.is_file() {
                    return Err(CliError::config(format!("dataset file {} does not exist", p.display())));
                }
            }
        } else {
            self.data.generator(self.data.total)?;
            if self.model.d_features != self.data.d_features {
                return Err(CliError::config(format!(
                    "model.d_features {} differs from data.d_features {}",
                    self.model.d_features, self.data.d_features
                )));
            }
            let sum: f64 = self.data.split.iter().sum();
            if self.data.split.iter().any(|f| *f <= 0.0) || (sum - 1.0).abs() > 1e-9 {
                return Err(CliError::config("data.split must hold three positive fractions summing to 1"));
            }
        }
        if let Some(&n) = self.ablation.memory.iter().find(|&&n| n > vsi::model::MAX_MEMORY_TOKENS) {
            return Err(CliError::config(format!("ablation.memory value {n} exceeds {}", vsi::model::MAX_MEMORY_TOKENS)));
        }
        if let Some(&d) = self.ablation.mlp_depth.iter().find(|&&d| !(1..=3).contains(&d)) {
            return Err(CliError::config(format!("ablation.mlp_depth value {d} is not in 1..=3")));
        }
        for s in &self.ablation.sizes {
            self.size_config(s).validated()?;
        }
        Ok(())
    }

    pub fn size_config(&self, s: &SizeSpec) -> ModelConfig {
        ModelConfig {
            d_model: s.d_model,
            n_layers: s.n_layers,
            d_ff: s.d_ff,
            n_heads: s.n_heads,
            ..self.model.clone()
        }
    }

    /// Setup for generated data; `None` when the config points at files.
    pub fn setup(&self) -> CliResult<Option<ExperimentSetup>> {
        if self.dataset.is_some() {
            return Ok(None);
        }
        Ok(Some(ExperimentSetup {
            data: self.data.generator(self.data.total)?,
            split: self.data.split,
            model: self.model.clone(),
            train: self.train.clone(),
            seeds: self.seeds.clone(),
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_uses_defaults() {
        let c = ExperimentConfig::parse("output_dir = \"out\"\n").unwrap();
        assert_eq!(c.seeds, vec![0]);
        assert_eq!(c.model, ModelConfig::default());
        assert_eq!(c.train, TrainConfig::default());
    }

    #[test]
    fn full_config_round_trips() {
        let text = r#"
output_dir = "runs/x"
seeds = [1, 2]

[data]
total = 200
mix = [0.5, 0.3, 0.2, 0.0]
split = [0.7, 0.15, 0.15]

[model]
variant = "late_fusion"
d_model = 16
n_heads = 2

[train]
lr = 0.002
optimizer = "sgd"
max_steps = 10

[ablation]
memory = [0, 1]

[[ablation.sizes]]
name = "tiny"
d_model = 8
n_layers = 1
d_ff = 16
n_heads = 2
"#;
        let c = ExperimentConfig::parse(text).unwrap();
        assert_eq!(c.model.variant, Variant::LateFusion);
        assert_eq!(c.ablation.sizes[0].name, "tiny");
        let back = ExperimentConfig::parse(&toml::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_bad_configs() {
        for bad in [
            "output_dir = \"o\"\nbogus = 1\n",
            "seeds = [1]\n",
            "output_dir = \"o\"\n[model]\nn_heads = 3\n",
            "output_dir = \"o\"\n[train]\nlr = -1.0\n",
            "output_dir = \"o\"\n[train]\nlr = 0.0\n",
            "output_dir = \"o\"\n[data]\nmix = [0.5, 0.5, 0.5, 0.0]\n",
            "output_dir = \"o\"\n[ablation]\nmemory = [9]\n",
            "output_dir = \"o\"\n[dataset]\ntrain = \"/nope\"\nvalidation = \"/nope\"\ntest = \"/nope\"\n",
        ] {
            let e = ExperimentConfig::parse(bad).unwrap_err();
            assert_eq!(e.code, crate::error::EXIT_CONFIG, "{bad}");
        }
    }

    #[test]
    fn readme_example_parses() {
        let readme = include_str!("../../../README.md");
        let start = readme.find("```toml\noutput_dir").expect("README has a config example") + "```toml\n".len();
        let end = start + readme[start..].find("```").unwrap();
        let cfg = ExperimentConfig::parse(&readme[start..end]).unwrap();
        assert_eq!(cfg.seeds, [0, 1, 2]);
        assert_eq!(cfg.ablation.sizes[0].name, "tiny");
        assert!(cfg.dataset.is_none());
    }
}
