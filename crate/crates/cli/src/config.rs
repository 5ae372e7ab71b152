//! Run configuration for `train`: a TOML file overridden by flags.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use deqkg::encoder::EncoderConfig;
use deqkg::eval::EvalProtocol;
use deqkg::training::TrainConfig;
use deqkg::Error;
use serde::{Deserialize, Serialize};

use crate::TrainArgs;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    /// Protocol for per-epoch validation ranking.
    pub validation: EvalProtocol,
    /// Trials of the invariance audit run on the final model.
    pub audit_trials: usize,
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: None,
            out: None,
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
            validation: EvalProtocol::default(),
            audit_trials: 20,
            workers: 1,
        }
    }
}

pub fn read(path: &Path) -> anyhow::Result<RunConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())).into())
}

/// File values (or defaults) with flags applied on top.
pub fn resolve(args: &TrainArgs, workers: usize) -> anyhow::Result<RunConfig> {
    let mut c = match &args.config {
        Some(p) => read(p)?,
        None => RunConfig::default(),
    };
    if args.data.is_some() {
        c.data = args.data.clone();
    }
    if args.out.is_some() {
        c.out = args.out.clone();
    }
    if let Some(v) = args.epochs {
        c.train.epochs = v;
    }
    if let Some(v) = args.learning_rate {
        c.train.learning_rate = v;
    }
    if let Some(v) = args.batch_size {
        c.train.batch_size = v;
    }
    if let Some(v) = args.seed {
        c.train.seed = v;
        c.encoder.seed = v;
        c.validation.seed = v;
    }
    if let Some(v) = args.num_layers {
        c.encoder.num_layers = v;
    }
    if let Some(v) = args.hidden_dim {
        c.encoder.hidden_dim = v;
    }
    if let Some(v) = &args.aggregation {
        c.encoder.aggregation = v.parse()?;
    }
    if let Some(v) = &args.inverse_mode {
        c.encoder.inverse_mode = v.parse()?;
    }
    if args.no_distance {
        c.encoder.use_distance = false;
    }
    if let Some(v) = args.patience {
        c.train.patience = (v > 0).then_some(v);
    }
    c.workers = workers;
    c.encoder.validate()?;
    c.train.validate()?;
    Ok(c)
}
