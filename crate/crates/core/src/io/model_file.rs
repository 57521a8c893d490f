//! Versioned JSON model files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::NormalizationRecord;
use crate::deep::DeepGpModel;
use crate::error::{DeepGpError, Result};
use crate::optimizer::{LayerSpec, OptimizerConfig, StopReason};

pub const FORMAT_VERSION: &str = "deepgp-model/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub seed: u64,
    pub optimizer: OptimizerConfig,
    pub final_bound: f64,
    pub iterations: usize,
    pub stop_reason: StopReason,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub version: String,
    /// Layer specs with every width filled in.
    pub architecture: Vec<LayerSpec>,
    pub model: DeepGpModel,
    pub normalization: NormalizationRecord,
    pub metadata: Option<TrainingMetadata>,
}

impl ModelFile {
    pub fn new(model: DeepGpModel, normalization: NormalizationRecord, metadata: Option<TrainingMetadata>) -> Self {
        let architecture = model
            .layers
            .iter()
            .map(|l| LayerSpec {
                hidden_dim: Some(l.output_dim()),
                kernel: l.kernel.family(),
                m: l.num_inducing(),
            })
            .collect();
        Self {
            version: FORMAT_VERSION.to_string(),
            architecture,
            model,
            normalization,
            metadata,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let found = value.get("version").and_then(|v| v.as_str()).unwrap_or("<missing>");
        if found != FORMAT_VERSION {
            return Err(DeepGpError::VersionMismatch {
                expected: FORMAT_VERSION.to_string(),
                found: found.to_string(),
            });
        }
        let file: ModelFile = serde_json::from_value(value)?;
        file.model.validate()?;
        Ok(file)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
