//! The run configuration: a single TOML document holding features,
//! network, infer loss, training schedule and optimiser settings.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio_data::{digest_json, FeatureConfig};
use crate::error::{Error, Result};
use crate::evaluation::EvalSettings;
use crate::losses::{MultiResConfig, MultiResLoss};
use crate::noise_model::NetworkConfig;
use crate::schedules::NoiseSchedule;
use crate::trainer::TrainingConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    /// Corpus manifest; relative paths resolve against the config file.
    pub manifest: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataConfig>,
    pub features: FeatureConfig,
    pub network: NetworkConfig,
    /// Infer-loss resolutions; evaluation reuses them for the MRSTFT metric.
    pub loss: MultiResConfig,
    #[serde(default = "NoiseSchedule::standard")]
    pub train_schedule: NoiseSchedule,
    pub training: TrainingConfig,
}

impl RunConfig {
    /// Desk presets around the given training settings.
    pub fn desk(training: TrainingConfig) -> Self {
        Self {
            data: None,
            features: FeatureConfig::desk(),
            network: NetworkConfig::desk(),
            loss: MultiResConfig::desk(),
            train_schedule: NoiseSchedule::standard(),
            training,
        }
    }

    pub fn check(&self) -> Result<()> {
        self.features.check()?;
        self.network.check()?;
        self.network.check_features(&self.features)?;
        self.loss.check()?;
        self.training.check()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Reads and checks a config file, resolving the manifest path.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(data) = &mut cfg.data {
            if data.manifest.is_relative() {
                data.manifest = path.parent().unwrap_or(Path::new(".")).join(&data.manifest);
            }
        }
        Ok(cfg)
    }

    pub fn digest(&self) -> String {
        digest_json(self)
    }

    pub fn infer_loss(&self) -> Result<MultiResLoss> {
        MultiResLoss::new(self.loss.clone(), &self.features)
    }

    pub fn eval_settings(&self) -> EvalSettings {
        EvalSettings {
            features: self.features.clone(),
            mrstft: self.loss.clone(),
            sampler: self.training.sampler,
            train_schedule: self.train_schedule.clone(),
        }
    }
}
