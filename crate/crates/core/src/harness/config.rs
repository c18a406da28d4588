use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::datasets::DatasetConfig;
use crate::diagnostics::{AlignmentSettings, InterferenceSettings};
use crate::error::{Error, Result};
use crate::replay::TrainerConfig;

/// Everything a run needs: seed, data, training and diagnostic settings.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub trainer: TrainerConfig,
    pub alignment: AlignmentSettings,
    pub interference: InterferenceSettings,
}

impl ExperimentConfig {
    /// Parses TOML text; `origin` names the source in error messages.
    pub fn from_toml(text: &str, origin: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_string(),
            message: e.to_string().trim_end().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self)
            .map_err(|e| Error::InvalidArgument(format!("config serialization: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.trainer.validate()?;
        let d = &self.dataset;
        for (key, v) in [
            ("dataset.classes_per_task", d.classes_per_task),
            ("dataset.train_per_class", d.train_per_class),
            ("dataset.test_per_class", d.test_per_class),
        ] {
            if v == 0 {
                return Err(Error::Config {
                    key: key.into(),
                    message: "must be ≥ 1".into(),
                });
            }
        }
        if !(d.noise >= 0.0) {
            return Err(Error::Config {
                key: "dataset.noise".into(),
                message: "must be ≥ 0".into(),
            });
        }
        for &l in &self.alignment.lambdas {
            if !(l >= 0.0) || !l.is_finite() {
                return Err(Error::Config {
                    key: "alignment.lambdas".into(),
                    message: "must be ≥ 0".into(),
                });
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }
}

/// Reads and validates a TOML experiment file.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    ExperimentConfig::from_toml(&text, &path.display().to_string())
}
