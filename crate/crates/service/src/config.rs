use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use loopweaver::hcloop::LoopConfig;
use serde::{Deserialize, Serialize};

use crate::error::ConfigError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub bind: String,
    pub port: u16,
    pub data_dir: Option<PathBuf>,
    /// Directory served under `/ui`.
    pub static_dir: Option<PathBuf>,
    pub session_ttl_secs: u64,
    pub griffin_lim_iterations: usize,
    pub seed: u64,
    /// Bearer key to user id.
    pub api_keys: BTreeMap<String, String>,
    pub admin_keys: Vec<String>,
    pub hcloop: LoopConfig,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1".into(),
            port: 8080,
            data_dir: None,
            static_dir: None,
            session_ttl_secs: 3600,
            griffin_lim_iterations: 32,
            seed: 1,
            api_keys: BTreeMap::new(),
            admin_keys: Vec::new(),
            hcloop: LoopConfig::default(),
        }
    }
}

impl ServiceConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read(path.to_path_buf(), e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.hcloop.validate()?;
        if self.session_ttl_secs == 0 {
            return Err(ConfigError::Invalid("session_ttl_secs must be positive".into()));
        }
        if self.griffin_lim_iterations == 0 {
            return Err(ConfigError::Invalid("griffin_lim_iterations must be positive".into()));
        }
        if let Some(k) = self.admin_keys.iter().find(|k| k.is_empty()) {
            return Err(ConfigError::Invalid(format!("empty admin key {k:?}")));
        }
        if self.api_keys.keys().any(|k| k.is_empty()) {
            return Err(ConfigError::Invalid("empty api key".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_nested_loop_settings() {
        let cfg = ServiceConfig::from_toml(
            r#"
            port = 9000
            admin_keys = ["root"]
            [api_keys]
            k1 = "ann"
            [hcloop]
            dispatch_probability = 0.3
            top_k = 50
            "#,
        )
        .unwrap();
        assert_eq!(cfg.port, 9000);
        assert_eq!(cfg.api_keys["k1"], "ann");
        assert_eq!(cfg.hcloop.top_k, 50);
        assert_eq!(cfg.hcloop.strength, LoopConfig::default().strength);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(ServiceConfig::from_toml("prot = 1").is_err());
        assert!(ServiceConfig::from_toml("[hcloop]\ndispatch_probability = 1.5").is_err());
        assert!(ServiceConfig::from_toml("session_ttl_secs = 0").is_err());
    }
}
