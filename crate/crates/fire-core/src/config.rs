//! Run configuration: one versioned JSON document binding the training,
//! model and perturbation settings. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::PerturbationSpec;
use crate::error::{FireError, Result};
use crate::model::ModelConfig;
use crate::trainer::{TrainConfig, TrainSetup};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub perturbation: PerturbationSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            version: CONFIG_VERSION,
            train: TrainConfig::default(),
            model: ModelConfig::default(),
            perturbation: PerturbationSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(FireError::InvalidArgument(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.train.validate()?;
        self.model.validate()?;
        self.perturbation.validate()
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| FireError::io(path.display().to_string(), e))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| FireError::format(path.display().to_string(), e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_setup(&self) -> TrainSetup {
        TrainSetup {
            train: self.train.clone(),
            model: self.model.clone(),
            perturbation: self.perturbation.clone(),
        }
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
