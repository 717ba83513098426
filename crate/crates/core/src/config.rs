//! Experiment configuration: one TOML document covering model topology,
//! training, sampling, and dataset-building parameters. Every key is
//! optional — missing keys take the documented defaults — and unknown keys
//! are rejected. Command-line flags override file values.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::model::ModelConfig;
use crate::sampler::SamplerConfig;
use crate::trainer::TrainConfig;

pub const DEFAULT_DELTA_T: usize = 100;
pub const DEFAULT_STRIDE: usize = 10;
pub const DEFAULT_SPLITS: [f64; 3] = [0.8, 0.1, 0.1];

/// Dataset-building parameters (`[dataset]` section).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DatasetParams {
    /// Frame horizon between input and target.
    pub delta_t: usize,
    /// Step between consecutive pair start frames.
    pub stride: usize,
    /// Train/val/test fractions; must sum to 1.
    pub splits: [f64; 3],
}

impl Default for DatasetParams {
    fn default() -> Self {
        DatasetParams {
            delta_t: DEFAULT_DELTA_T,
            stride: DEFAULT_STRIDE,
            splits: DEFAULT_SPLITS,
        }
    }
}

impl DatasetParams {
    pub fn validate(&self) -> Result<()> {
        if self.delta_t == 0 {
            return Err(CoreError::Config("dataset.delta_t must be >= 1".into()));
        }
        if self.splits.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(CoreError::Config(format!(
                "dataset.splits must lie in [0,1], got {:?}",
                self.splits
            )));
        }
        let sum: f64 = self.splits.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(CoreError::Config(format!(
                "dataset.splits must sum to 1, got {sum}"
            )));
        }
        Ok(())
    }
}

/// The complete experiment configuration document.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub dataset: DatasetParams,
}

impl AppConfig {
    /// Small-machine preset across all sections.
    pub fn desk() -> AppConfig {
        AppConfig {
            model: ModelConfig::desk(),
            train: TrainConfig::desk(),
            sampler: SamplerConfig::default(),
            dataset: DatasetParams::default(),
        }
    }

    /// Cross-section validation; catches mistakes before any work starts.
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.dataset.validate()?;
        if self.sampler.num_steps == 0 || self.sampler.num_steps > self.model.schedule_steps {
            return Err(CoreError::Config(format!(
                "sampler.num_steps {} outside 1..={}",
                self.sampler.num_steps, self.model.schedule_steps
            )));
        }
        if !(self.sampler.guidance_weight.is_finite() && self.sampler.guidance_weight >= 0.0) {
            return Err(CoreError::Config(format!(
                "sampler.guidance_weight {} must be finite and >= 0",
                self.sampler.guidance_weight
            )));
        }
        if !(0.0..=1.0).contains(&self.sampler.eta) {
            return Err(CoreError::Config(format!(
                "sampler.eta {} outside [0,1]",
                self.sampler.eta
            )));
        }
        for &res in &self.train.stage_resolutions {
            let f = self.model.codec.spatial_factor;
            if res % f != 0 {
                return Err(CoreError::Config(format!(
                    "train.stage_resolutions entry {res} is not divisible by \
                     model.codec.spatial_factor {f}"
                )));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| CoreError::Config(format!("config serialization failed: {e}")))
    }
}

/// Parse a TOML document into a validated configuration.
pub fn parse_config(text: &str) -> Result<AppConfig> {
    let cfg: AppConfig =
        toml::from_str(text).map_err(|e| CoreError::Config(format!("config parse error: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Load and validate a configuration file.
pub fn load_config(path: &Path) -> Result<AppConfig> {
    let text = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
    parse_config(&text)
}
