//! JSON checkpoints: config echo plus flat named parameter arrays.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::training::TrainConfig;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    /// Number of the next epoch a resumed run starts at.
    #[serde(default)]
    pub next_epoch: usize,
    /// Names of the training nodes and relations, for disjointness checks.
    #[serde(default)]
    pub train_nodes: Vec<String>,
    #[serde(default)]
    pub train_relations: Vec<String>,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(params: &EncoderParams) -> Self {
        let tensors = params
            .named_tensors()
            .into_iter()
            .map(|(name, shape, data)| {
                (
                    name,
                    Tensor {
                        shape,
                        data: data.to_vec(),
                    },
                )
            })
            .collect();
        Self {
            version: CHECKPOINT_VERSION,
            encoder: params.config.clone(),
            train: None,
            next_epoch: 0,
            train_nodes: Vec::new(),
            train_relations: Vec::new(),
            tensors,
        }
    }

    pub fn params(&self) -> Result<EncoderParams> {
        let map: HashMap<String, (Vec<usize>, Vec<f64>)> = self
            .tensors
            .iter()
            .map(|(k, t)| (k.clone(), (t.shape.clone(), t.data.clone())))
            .collect();
        EncoderParams::from_named(&self.encoder, &map)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        match value.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == CHECKPOINT_VERSION as u64 => {}
            Some(v) => return Err(Error::Schema(format!("unsupported checkpoint version {v}"))),
            None => return Err(Error::Schema("checkpoint is missing field `version`".into())),
        }
        let ckpt: Self = serde_json::from_value(value).map_err(|e| Error::Schema(format!("checkpoint: {e}")))?;
        ckpt.params()?;
        Ok(ckpt)
    }
}
