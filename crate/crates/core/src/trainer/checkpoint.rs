//! Checkpoint directories.
//!
//! ```text
//! <dir>/meta.json                 format version, configs, step, seeds
//! <dir>/params/<name>.bin         one blob per parameter
//! <dir>/optimizer/m/<name>.bin    Adam first moments
//! <dir>/optimizer/v/<name>.bin    Adam second moments
//! ```
//!
//! Blobs are a little-endian `u64` rank, `u64` dimensions, then `f32` values.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{OptimizerConfig, TrainState};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ParameterSet};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub model_config: ModelConfig,
    pub optimizer_config: OptimizerConfig,
    pub step: u64,
    pub init_seed: u64,
    pub data_seed: u64,
    pub best_val_loss: Option<f64>,
}

fn read_meta(dir: &Path) -> Result<CheckpointMeta> {
    let path = dir.join("meta.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Corrupt {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    let found = value
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| Error::Corrupt {
            path: path.clone(),
            reason: "missing format_version".into(),
        })?;
    if found != FORMAT_VERSION as u64 {
        return Err(Error::IncompatibleVersion {
            found: u32::try_from(found).unwrap_or(u32::MAX),
            expected: FORMAT_VERSION,
        });
    }
    serde_json::from_value(value).map_err(|e| Error::Corrupt {
        path,
        reason: e.to_string(),
    })
}

pub fn save_checkpoint(state: &TrainState, opt: &OptimizerConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let meta = CheckpointMeta {
        format_version: FORMAT_VERSION,
        model_config: state.model.config().clone(),
        optimizer_config: opt.clone(),
        step: state.step,
        init_seed: state.init_seed,
        data_seed: state.data_seed,
        best_val_loss: state.best_val_loss,
    };
    state.model.parameters().save_blobs(&dir.join("params"))?;
    state.first_moment.save_blobs(&dir.join("optimizer").join("m"))?;
    state.second_moment.save_blobs(&dir.join("optimizer").join("v"))?;
    let path = dir.join("meta.json");
    let json = serde_json::to_string_pretty(&meta)?;
    fs::write(&path, json + "\n").map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Restores the full training state plus the optimizer configuration it was saved with.
pub fn load_checkpoint(dir: &Path) -> Result<(TrainState, OptimizerConfig)> {
    let meta = read_meta(dir)?;
    let model = load_params(dir, meta.model_config.clone())?;
    let layout = model.parameters();
    let first_moment = ParameterSet::load_blobs(layout, &dir.join("optimizer").join("m"))?;
    let second_moment = ParameterSet::load_blobs(layout, &dir.join("optimizer").join("v"))?;
    Ok((
        TrainState {
            step: meta.step,
            model,
            first_moment,
            second_moment,
            data_seed: meta.data_seed,
            init_seed: meta.init_seed,
            best_val_loss: meta.best_val_loss,
        },
        meta.optimizer_config,
    ))
}

fn load_params(dir: &Path, config: ModelConfig) -> Result<Model> {
    let layout = Model::build(config.clone(), 0)?;
    let params = ParameterSet::load_blobs(layout.parameters(), &dir.join("params"))?;
    Model::from_parameters(config, params)
}

/// Loads only the network (configuration from `meta.json`).
pub fn load_model(dir: &Path) -> Result<Model> {
    load_params(dir, read_meta(dir)?.model_config)
}

/// Loads the network's parameters into the architecture described by `config`,
/// failing with a shape mismatch that names the first incompatible parameter.
pub fn load_model_with_config(dir: &Path, config: &ModelConfig) -> Result<Model> {
    read_meta(dir)?;
    load_params(dir, config.clone())
}
