//! TOML run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Column, CsvOptions};
use crate::deep::Mode;
use crate::error::{DeepGpError, Result};
use crate::optimizer::{Architecture, LayerSpec, OptimizerConfig};

/// Where training data comes from when no file is given on the command line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub path: PathBuf,
    #[serde(default = "yes")]
    pub has_header: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x_cols: Option<Vec<Column>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y_cols: Option<Vec<Column>>,
    #[serde(default)]
    pub normalize: bool,
}

fn yes() -> bool {
    true
}

impl DataConfig {
    /// CSV options for this mode. Autoencoder files default to every column as target.
    pub fn csv_options(&self, mode: Mode) -> CsvOptions {
        let (x_cols, y_cols) = match mode {
            Mode::Regression => (self.x_cols.clone(), self.y_cols.clone()),
            Mode::Autoencoder => (Some(Vec::new()), self.y_cols.clone().or_else(|| self.x_cols.clone())),
        };
        CsvOptions {
            has_header: self.has_header,
            x_cols,
            y_cols,
            normalize: self.normalize,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "regression")]
    pub mode: Mode,
    /// Seeds initialization and the minibatch schedule; overrides `optimizer.seed`.
    #[serde(default)]
    pub seed: u64,
    /// Overrides `optimizer.tie_lengthscales`.
    #[serde(default)]
    pub tie_lengthscales: bool,
    pub architecture: Vec<LayerSpec>,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataConfig>,
}

fn regression() -> Mode {
    Mode::Regression
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut config: RunConfig = toml::from_str(text).map_err(|e| DeepGpError::Config(e.to_string()))?;
        config.resolve();
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| DeepGpError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Copies the top-level keys into the optimizer settings.
    pub fn resolve(&mut self) {
        self.optimizer.seed = self.seed;
        self.optimizer.tie_lengthscales = self.tie_lengthscales;
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            layers: self.architecture.clone(),
            mode: self.mode,
            tie_lengthscales: self.tie_lengthscales,
        }
    }

    /// The resolved configuration as TOML.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| DeepGpError::Config(e.to_string()))
    }
}
