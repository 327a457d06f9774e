//! TOML run configuration: `[model]` (with `[model.backbone]`), `[data]`,
//! `[train]`. Every key is optional; see `examples/configs/` for a fully
//! spelled-out file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::LossKind;
use crate::data::{MissingPolicy, SynthKind};
use crate::error::{Error, Result};
use crate::harness::optim::OptimizerKind;
use crate::metrics::MaseScaling;
use crate::model::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Synthetic forecasting series.
    #[default]
    Synth,
    /// Forecasting series from a CSV file.
    Csv,
    /// Synthetic labelled series for classification.
    SynthClass,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub synth_kind: SynthKind,
    pub length: usize,
    pub synth_seed: u64,
    pub channels: usize,
    pub noise: f64,
    pub path: Option<PathBuf>,
    pub has_header: bool,
    pub timestamp_col: Option<usize>,
    pub missing: MissingPolicy,
    /// Use only these channels of a CSV (all when empty).
    pub channel_subset: Vec<usize>,
    pub window_stride: usize,
    pub split: (f64, f64, f64),
    /// Keep the first `ceil(ratio · n)` training windows.
    pub few_shot_ratio: f64,
    pub per_class: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synth,
            synth_kind: SynthKind::SineMix,
            length: 2000,
            synth_seed: 7,
            channels: 1,
            noise: 0.1,
            path: None,
            has_header: true,
            timestamp_col: Some(0),
            missing: MissingPolicy::Strict,
            channel_subset: Vec::new(),
            window_stride: 1,
            split: (0.7, 0.1, 0.2),
            few_shot_ratio: 1.0,
            per_class: 40,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EvalMetric {
    /// MSE / MAE in original units.
    #[default]
    Point,
    /// SMAPE / MASE / OWA against Naive2.
    M4,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub t_max: usize,
    pub eta_min: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub loss: LossKind,
    pub optimizer: OptimizerKind,
    pub metric: EvalMetric,
    /// Seasonal period for MASE and Naive2.
    pub seasonality: usize,
    pub mase_scaling: MaseScaling,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-4,
            betas: (0.9, 0.999),
            eps: 1e-8,
            t_max: 20,
            eta_min: 1e-8,
            batch_size: 32,
            patience: 5,
            max_epochs: 10,
            seed: 0,
            loss: LossKind::Mse,
            optimizer: OptimizerKind::Adam,
            metric: EvalMetric::Point,
            seasonality: 1,
            mase_scaling: MaseScaling::Insample,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > self.eta_min && self.eta_min >= 0.0) {
            return Err(Error::Config("need lr0 > eta_min >= 0".into()));
        }
        if self.patience == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("patience, batch_size and max_epochs must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    /// SHA-256 over the canonical JSON form.
    pub fn digest(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("config serializes");
        crate::harness::checkpoint::digest_bytes(&json)
    }

    /// Digest of the model section alone; checkpoints are tied to it.
    pub fn model_digest(&self) -> [u8; 32] {
        let json = serde_json::to_vec(&self.model).expect("config serializes");
        crate::harness::checkpoint::digest_bytes(&json)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_and_bad_files() {
        let cfg = RunConfig::from_toml("[model]\nparts = 3\n[train]\nlr0 = 5e-4\n").unwrap();
        assert_eq!(cfg.model.parts, 3);
        assert_eq!(cfg.train.lr0, 5e-4);
        assert!(RunConfig::from_toml("[model]\nbogus = 1\n").is_err());
        assert!(RunConfig::from_toml("[train]\nlr0 = 0.0\n").is_err());
    }
}
