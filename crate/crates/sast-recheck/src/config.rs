//! Run configuration: a TOML file plus per-flag overrides from the CLI.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assess::AssessmentConfig;
use crate::gateway::{Mode, ModelEndpoint};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    /// Threshold grid override; default is 1.0..=9.0 step 1.
    #[serde(default)]
    pub grid: Option<Vec<f64>>,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default)]
    pub assessment: AssessmentConfig,
    #[serde(default)]
    pub endpoints: Vec<ModelEndpoint>,
    #[serde(default)]
    pub template_path: Option<PathBuf>,
}

fn default_beta() -> f64 {
    crate::calibrate::DEFAULT_BETA
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: Mode::default(),
            cache_dir: None,
            grid: None,
            beta: default_beta(),
            assessment: AssessmentConfig::default(),
            endpoints: Vec::new(),
            template_path: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Read { path: path.into(), source })?;
        let config: RunConfig =
            toml::from_str(&text).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Checked before any network call.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.beta <= 0.0 {
            return Err(ConfigError::Invalid("beta must be positive".into()));
        }
        let a = &self.assessment;
        if a.sc_runs < 1 {
            return Err(ConfigError::Invalid("sc_runs must be at least 1".into()));
        }
        if a.main_temperature < 0.0 || a.sc_temperature < 0.0 {
            return Err(ConfigError::Invalid("temperatures must be non-negative".into()));
        }
        if a.budget_tokens == 0 {
            return Err(ConfigError::Invalid("budget_tokens must be positive".into()));
        }
        if let Some(grid) = &self.grid {
            crate::calibrate::ThresholdGrid::new(grid.clone())
                .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        let mut seen = std::collections::HashSet::new();
        for endpoint in &self.endpoints {
            if !seen.insert(&endpoint.model_id) {
                return Err(ConfigError::Invalid(format!(
                    "duplicate endpoint model_id {}",
                    endpoint.model_id
                )));
            }
        }
        Ok(())
    }

    pub fn endpoint(&self, model_id: &str) -> Option<&ModelEndpoint> {
        self.endpoints.iter().find(|e| e.model_id == model_id)
    }
}
