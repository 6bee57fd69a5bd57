//! JSON checkpoint: config, normalization constants, threshold and every
//! parameter tensor as a row-major array. Floats are written in shortest
//! round-trip form, so a save/load cycle is bit-exact.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{LstmAutoencoder, TrainConfig};
use crate::artifacts::Provenance;
use crate::error::{Error, Result};
use crate::features::NormalizationConstants;

pub const CHECKPOINT_FORMAT: &str = "moodshift.lstm-autoencoder";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub provenance: Option<Provenance>,
    pub config: TrainConfig,
    pub hidden: usize,
    pub seed: u64,
    pub percentile: Option<f64>,
    pub threshold: Option<f64>,
    pub validation_errors: Vec<f64>,
    pub normalization: BTreeMap<String, NormalizationConstants>,
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn new(
        model: &LstmAutoencoder,
        config: TrainConfig,
        normalization: BTreeMap<String, NormalizationConstants>,
        validation_errors: Vec<f64>,
        percentile: Option<f64>,
    ) -> Self {
        let layout = model.layout();
        let tensors = layout
            .blocks()
            .into_iter()
            .map(|(name, offset, rows, cols)| Tensor {
                name: name.to_string(),
                shape: [rows, cols],
                data: model.params()[offset..offset + rows * cols].to_vec(),
            })
            .collect();
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            provenance: None,
            config,
            hidden: model.hidden(),
            seed: model.seed,
            percentile,
            threshold: model.threshold,
            validation_errors,
            normalization,
            tensors,
        }
    }

    pub fn model(&self) -> Result<LstmAutoencoder> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::InvalidInput(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        let layout = super::Layout::new(self.hidden);
        let blocks = layout.blocks();
        if blocks.len() != self.tensors.len() {
            return Err(Error::InvalidInput("checkpoint tensor count mismatch".into()));
        }
        let mut params = vec![0.0; layout.len()];
        for ((name, offset, rows, cols), t) in blocks.into_iter().zip(&self.tensors) {
            if t.name != name || t.shape != [rows, cols] || t.data.len() != rows * cols {
                return Err(Error::InvalidInput(format!(
                    "checkpoint tensor `{}` {:?} does not match expected `{name}` [{rows}, {cols}]",
                    t.name, t.shape
                )));
            }
            params[offset..offset + rows * cols].copy_from_slice(&t.data);
        }
        let mut model = LstmAutoencoder::from_params(self.hidden, params, self.seed)?;
        model.threshold = self.threshold;
        Ok(model)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}
