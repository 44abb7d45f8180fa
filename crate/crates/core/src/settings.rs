//! TOML settings file with one section per component. Every section and key
//! is optional; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baseline_vae::VaeConfig;
use crate::error::{ClsmError, Result};
use crate::lm::LmConfig;
use crate::model::ModelConfig;
use crate::training::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub vae: VaeConfig,
    pub lm: LmConfig,
}

impl Settings {
    /// Small models matching the synthetic corpus.
    pub fn toy() -> Self {
        Self { model: ModelConfig::toy(), train: TrainConfig::default(), vae: VaeConfig::toy(), lm: LmConfig::toy() }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let s: Settings = toml::from_str(text).map_err(|e| ClsmError::InvalidConfig(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("settings serialize")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.vae.validate()?;
        self.lm.validate()
    }
}
