//! Versioned checkpoint container.
//!
//! A single safetensors file holds the trainable store (`student/param.*`,
//! `student/buffer.*`), the frozen guide (`guide/...`), and string metadata:
//! format tag, version, model config (JSON), an opaque run-config snapshot,
//! counters, and the calibrated λ values.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GTrans, GuideInit, ModelConfig};

pub const FORMAT: &str = "gtrans-checkpoint";
pub const VERSION: &str = "1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    /// Resolved run configuration, stored verbatim.
    pub run_config: String,
    pub category: String,
    pub seed: u64,
    pub epoch: usize,
    pub step: usize,
    pub best_val_loss: f64,
    pub lambdas: Option<Vec<f64>>,
    pub guide_checksum: String,
}

fn to_strings(meta: &CheckpointMeta) -> Result<HashMap<String, String>> {
    let mut m = HashMap::new();
    m.insert("format".into(), FORMAT.into());
    m.insert("version".into(), VERSION.into());
    m.insert("model".into(), serde_json::to_string(&meta.model)?);
    m.insert("run_config".into(), meta.run_config.clone());
    m.insert("category".into(), meta.category.clone());
    m.insert("seed".into(), meta.seed.to_string());
    m.insert("epoch".into(), meta.epoch.to_string());
    m.insert("step".into(), meta.step.to_string());
    m.insert("best_val_loss".into(), serde_json::to_string(&meta.best_val_loss)?);
    m.insert("lambdas".into(), serde_json::to_string(&meta.lambdas)?);
    m.insert("guide_checksum".into(), meta.guide_checksum.clone());
    Ok(m)
}

fn from_strings(m: &HashMap<String, String>) -> Result<CheckpointMeta> {
    let get = |k: &str| m.get(k).ok_or_else(|| Error::Checkpoint(format!("metadata lacks `{k}`")));
    if get("format")? != FORMAT {
        return Err(Error::Checkpoint(format!("not a checkpoint (format `{}`)", get("format")?)));
    }
    let version = get("version")?;
    if version != VERSION {
        return Err(Error::VersionMismatch { found: version.clone(), expected: VERSION.into() });
    }
    let number = |k: &str| -> Result<u64> {
        get(k)?.parse().map_err(|_| Error::Checkpoint(format!("metadata `{k}` is not an integer")))
    };
    Ok(CheckpointMeta {
        model: serde_json::from_str(get("model")?)
            .map_err(|e| Error::VersionMismatch { found: format!("model config ({e})"), expected: VERSION.into() })?,
        run_config: get("run_config")?.clone(),
        category: get("category")?.clone(),
        seed: number("seed")?,
        epoch: number("epoch")? as usize,
        step: number("step")? as usize,
        best_val_loss: serde_json::from_str(get("best_val_loss")?)?,
        lambdas: serde_json::from_str(get("lambdas")?)?,
        guide_checksum: get("guide_checksum")?.clone(),
    })
}

pub fn save(path: &Path, model: &GTrans, meta: &CheckpointMeta) -> Result<()> {
    let mut tensors: Vec<(String, Tensor)> = model.store().export("student/")?;
    tensors.extend(model.guide_store().export("guide/")?);
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    safetensors::serialize_to_file(tensors, Some(to_strings(meta)?), path)
        .map_err(|e| Error::Checkpoint(format!("writing {}: {e}", path.display())))
}

pub fn read_meta(bytes: &[u8]) -> Result<CheckpointMeta> {
    let (_, header) =
        safetensors::SafeTensors::read_metadata(bytes).map_err(|e| Error::Checkpoint(format!("bad container: {e}")))?;
    let strings = header.metadata().clone().unwrap_or_default();
    from_strings(&strings)
}

/// Rebuilds the model described by the checkpoint and loads every tensor.
pub fn load(path: &Path) -> Result<(GTrans, CheckpointMeta)> {
    let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint(format!("reading {}: {e}", path.display())))?;
    let meta = read_meta(&bytes)?;
    let tensors = candle_core::safetensors::load_buffer(&bytes, &candle_core::Device::Cpu)?;
    let dtype = tensors.values().next().map(|t| t.dtype()).unwrap_or(DType::F32);
    let model = GTrans::build(&meta.model, meta.seed, dtype, GuideInit::Deferred)?;
    let lookup = |k: &str| tensors.get(k).cloned();
    model.store().import("student/", &lookup)?;
    model.guide_store().import("guide/", &lookup)?;
    let checksum = model.guide_checksum()?;
    if checksum != meta.guide_checksum {
        return Err(Error::Checkpoint("guide weights do not match the recorded checksum".into()));
    }
    Ok((model, meta))
}
