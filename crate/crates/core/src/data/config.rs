use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::elbo::TrainConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Features decoded without the monotone constraint. All others are
    /// monotone.
    pub non_monotone: Vec<String>,
    /// Fraction of individuals used for training; the rest are held out.
    pub train_fraction: f64,
    /// Upper age bound (exclusive) of the background cohort for
    /// contrastive PCA.
    pub background_max_age: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            non_monotone: Vec::new(),
            train_fraction: 0.8,
            background_max_age: 50.0,
        }
    }
}

/// Contents of a run configuration file: `[model]`, `[train]` and `[data]`
/// tables whose keys are the field names of the corresponding structs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.train.validate()?;
        if !(0.0..=1.0).contains(&cfg.data.train_fraction) {
            return Err(Error::Config(format!(
                "train_fraction = {} outside [0, 1]",
                cfg.data.train_fraction
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}
