use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::OptimizerState;
use super::params::ModelParams;
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const FORMAT: &str = "glca-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StoredTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Stored {
    format: String,
    version: u32,
    config: ModelConfig,
    params: Vec<StoredTensor>,
    optimizer: Option<OptimizerState>,
}

/// Model configuration, parameters and (optionally) optimizer state,
/// persisted as JSON.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        let stored = Stored {
            format: FORMAT.into(),
            version: VERSION,
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|(name, t)| StoredTensor {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    data: t.to_vec(),
                })
                .collect(),
            optimizer: self.optimizer.clone(),
        };
        serde_json::to_string(&stored).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    /// Parses and validates: every tensor must have the shape the stored
    /// config calls for.
    pub fn from_json(text: &str) -> Result<Self> {
        let stored: Stored =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if stored.format != FORMAT || stored.version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                stored.format, stored.version
            )));
        }
        stored.config.validate()?;
        let entries = stored
            .params
            .into_iter()
            .map(|s| {
                let t = Tensor::new(&s.shape, s.data).map_err(|e| {
                    Error::Checkpoint(format!("parameter {}: {e}", s.name))
                })?;
                Ok((s.name, t))
            })
            .collect::<Result<Vec<_>>>()?;
        let params = ModelParams::from_entries(entries);
        params.check_layout(&stored.config)?;
        if !params.all_finite() {
            return Err(Error::Checkpoint("non-finite parameter values".into()));
        }
        if let Some(opt) = &stored.optimizer {
            opt.check(&params)?;
        }
        Ok(Checkpoint {
            config: stored.config,
            params,
            optimizer: stored.optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
