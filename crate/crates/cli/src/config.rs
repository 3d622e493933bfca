use std::path::Path;

use anyhow::{Context, Result};
use loopweaver::simrater::{ExperimentConfig, SetupConfig};
use loopweaver_service::ServiceConfig;
use serde::{Deserialize, Serialize};

/// Contents of `loopweaver.toml`. Every section is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Corpus, base denoiser and VQ settings.
    pub setup: SetupConfig,
    pub service: ServiceConfig,
    pub experiment: ExperimentConfig,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.service.validate()?;
        cfg.experiment.validate()?;
        Ok(cfg)
    }
}
