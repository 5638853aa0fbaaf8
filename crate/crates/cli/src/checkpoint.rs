//! Checkpoint files: named parameter tensors + config + seed + iteration,
//! as JSON. Values round-trip bit-exactly (shortest-representation float
//! serialization), so a reloaded model reproduces the original exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use semimultipose_core::engine::{Real, Tensor};
use semimultipose_core::model::{ModelConfig, ModelParams};

use crate::error::{AppError, Result};

const FORMAT: &str = "semimultipose-checkpoint-v1";

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    data: Vec<Real>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    config: ModelConfig,
    seed: u64,
    iteration: usize,
    params: Vec<ParamEntry>,
}

pub fn save(params: &ModelParams, iteration: usize, path: &Path) -> Result<()> {
    let file = CheckpointFile {
        format: FORMAT.to_string(),
        config: params.config.clone(),
        seed: params.seed,
        iteration,
        params: params
            .named()
            .into_iter()
            .map(|(name, t)| ParamEntry {
                name,
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
            .collect(),
    };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_vec(&file)?)?;
    Ok(())
}

/// Loads a checkpoint, returning the model and the iteration it was taken at.
pub fn load(path: &Path) -> Result<(ModelParams, usize)> {
    let bytes = fs::read(path)
        .map_err(|e| AppError::validation(format!("cannot read {}: {e}", path.display())))?;
    let file: CheckpointFile = serde_json::from_slice(&bytes)
        .map_err(|e| AppError::validation(format!("malformed checkpoint {}: {e}", path.display())))?;
    if file.format != FORMAT {
        return Err(AppError::validation(format!(
            "unsupported checkpoint format {:?}",
            file.format
        )));
    }
    let mut params =
        ModelParams::init(&file.config, file.seed).map_err(AppError::from_core)?;
    let mut entries: std::collections::BTreeMap<String, ParamEntry> = file
        .params
        .into_iter()
        .map(|e| (e.name.clone(), e))
        .collect();
    for (name, tensor) in params.named_mut() {
        let entry = entries
            .remove(&name)
            .ok_or_else(|| AppError::validation(format!("checkpoint missing tensor {name}")))?;
        if entry.shape != tensor.shape() {
            return Err(AppError::validation(format!(
                "checkpoint tensor {name} has shape {:?}, model expects {:?}",
                entry.shape,
                tensor.shape()
            )));
        }
        *tensor = Tensor::new(&entry.shape, entry.data)
            .map_err(|e| AppError::validation(format!("checkpoint tensor {name}: {e}")))?
            .with_requires_grad(true);
    }
    if let Some(name) = entries.keys().next() {
        return Err(AppError::validation(format!(
            "checkpoint contains unknown tensor {name}"
        )));
    }
    Ok((params, file.iteration))
}
