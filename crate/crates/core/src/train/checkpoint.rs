//! Binary checkpoint container.
//!
//! Layout: magic `ATXCKPT1`, little-endian `u64` metadata length, JSON
//! metadata, then each tensor as little-endian `f32` in manifest order.

use crate::arch::ArchConfig;
use crate::error::{Error, Result};
use crate::metrics::Metrics;
use crate::model::Model;
use crate::nn::Module;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"ATXCKPT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the tensor data section.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    pub arch: ArchConfig,
    pub epoch: usize,
    pub seed: u64,
    pub metrics: Option<Metrics>,
    pub tensors: Vec<TensorEntry>,
}

/// Serializes weights and batch-norm statistics.
pub fn encode_checkpoint(model: &Model<f32>, epoch: usize, seed: u64, metrics: Option<Metrics>) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut blob = Vec::new();
    model.visit("", &mut |name, t| {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: blob.len() as u64,
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    });
    let meta = CheckpointMeta {
        version: FORMAT_VERSION,
        arch: model.config.clone(),
        epoch,
        seed,
        metrics,
        tensors,
    };
    let json = serde_json::to_vec(&meta)?;
    let mut out = Vec::with_capacity(16 + json.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    Ok(out)
}

pub fn save_checkpoint(path: &Path, model: &Model<f32>, epoch: usize, seed: u64, metrics: Option<Metrics>) -> Result<()> {
    let bytes = encode_checkpoint(model, epoch, seed, metrics)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn format(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Model<f32>, CheckpointMeta)> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(format("not a checkpoint (bad magic)"));
    }
    let meta_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let meta_end = 16u64
        .checked_add(meta_len)
        .filter(|&e| e <= bytes.len() as u64)
        .ok_or_else(|| format("truncated metadata"))? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(&bytes[16..meta_end]).map_err(|e| format(format!("metadata: {e}")))?;
    if meta.version != FORMAT_VERSION {
        return Err(format(format!("unsupported format version {}", meta.version)));
    }
    let data = &bytes[meta_end..];
    let mut expected = 0u64;
    for t in &meta.tensors {
        if t.offset != expected {
            return Err(format(format!("tensor `{}` at offset {}, expected {expected}", t.name, t.offset)));
        }
        expected += 4 * t.shape.iter().product::<usize>() as u64;
    }
    if data.len() as u64 != expected {
        return Err(format(format!("tensor data is {} bytes, manifest needs {expected}", data.len())));
    }
    let mut model = Model::<f32>::new(&meta.arch, 0).map_err(|e| format(format!("architecture: {e}")))?;
    let mut entries = meta.tensors.iter();
    let mut failure = None;
    model.visit_mut("", &mut |name, t| {
        if failure.is_some() {
            return;
        }
        match entries.next() {
            Some(e) if e.name == name && e.shape == t.shape() => {
                let raw = &data[e.offset as usize..e.offset as usize + 4 * t.len()];
                for (v, b) in t.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
                    *v = f32::from_le_bytes(b.try_into().expect("4 bytes"));
                }
            }
            Some(e) => failure = Some(format!("manifest has `{}` {:?} where the model has `{name}` {:?}", e.name, e.shape, t.shape())),
            None => failure = Some(format!("manifest lacks `{name}`")),
        }
    });
    if let Some(msg) = failure {
        return Err(format(msg));
    }
    if let Some(extra) = entries.next() {
        return Err(format(format!("manifest has unknown tensor `{}`", extra.name)));
    }
    Ok((model, meta))
}

pub fn load_checkpoint(path: &Path) -> Result<(Model<f32>, CheckpointMeta)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Loads a checkpoint that must have been trained with `arch`.
pub fn load_checkpoint_for(path: &Path, arch: &ArchConfig) -> Result<(Model<f32>, CheckpointMeta)> {
    let (model, meta) = load_checkpoint(path)?;
    if &meta.arch != arch {
        return Err(format(format!(
            "checkpoint architecture `{}` does not match expected `{}`",
            meta.arch.name, arch.name
        )));
    }
    Ok((model, meta))
}
