//! Checkpoint files: a JSON manifest listing tensors in order and a flat
//! little-endian `f32` weight blob concatenated in manifest order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{AdamState, ParamStore};

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: malformed manifest: {source}")]
    Manifest {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("tensor {name}: {reason}")]
    Mismatch { name: String, reason: String },
    #[error("{0}")]
    Format(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_offset: u64,
}

/// Manifest document. `metadata` carries whatever the owner needs to rebuild
/// the model (configuration, update counter).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn encode_weights(params: &ParamStore) -> Result<(Vec<TensorEntry>, Vec<u8>), CheckpointError> {
    let mut entries = Vec::with_capacity(params.len());
    let mut blob = Vec::with_capacity(params.numel() * 4);
    for (name, t) in params.iter() {
        entries.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
            byte_offset: blob.len() as u64,
        });
        for &v in t.data() {
            let f = v as f32;
            if f64::from(f) != v {
                return Err(CheckpointError::Mismatch {
                    name: name.to_string(),
                    reason: format!("value {v} is not representable as f32"),
                });
            }
            blob.extend_from_slice(&f.to_le_bytes());
        }
    }
    Ok((entries, blob))
}

pub fn save(
    params: &ParamStore,
    metadata: serde_json::Value,
    manifest_path: &Path,
    weights_path: &Path,
) -> Result<Manifest, CheckpointError> {
    let (tensors, blob) = encode_weights(params)?;
    let manifest = Manifest { tensors, metadata };
    let json = serde_json::to_vec_pretty(&manifest).map_err(|source| CheckpointError::Manifest {
        path: manifest_path.to_path_buf(),
        source,
    })?;
    fs::write(weights_path, blob).map_err(io_err(weights_path))?;
    fs::write(manifest_path, json).map_err(io_err(manifest_path))?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<Manifest, CheckpointError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    serde_json::from_slice(&bytes).map_err(|source| CheckpointError::Manifest {
        path: path.to_path_buf(),
        source,
    })
}

/// Fills `params` from a checkpoint; every name and shape must match in order.
pub fn load_into(
    params: &mut ParamStore,
    manifest: &Manifest,
    weights_path: &Path,
) -> Result<(), CheckpointError> {
    let blob = fs::read(weights_path).map_err(io_err(weights_path))?;
    decode_weights(params, manifest, &blob)
}

pub fn decode_weights(
    params: &mut ParamStore,
    manifest: &Manifest,
    blob: &[u8],
) -> Result<(), CheckpointError> {
    if manifest.tensors.len() != params.len() {
        return Err(CheckpointError::Format(format!(
            "checkpoint holds {} tensors, model expects {}",
            manifest.tensors.len(),
            params.len()
        )));
    }
    for (i, e) in manifest.tensors.iter().enumerate() {
        let expected_name = params.name(i).to_string();
        if e.name != expected_name {
            return Err(CheckpointError::Mismatch {
                name: e.name.clone(),
                reason: format!("found at position {i}, model expects {expected_name}"),
            });
        }
        let t = params.tensor_mut(i);
        if e.shape != t.shape() {
            return Err(CheckpointError::Mismatch {
                name: e.name.clone(),
                reason: format!("shape {:?} in checkpoint, model expects {:?}", e.shape, t.shape()),
            });
        }
        if e.dtype != "f32" {
            return Err(CheckpointError::Mismatch {
                name: e.name.clone(),
                reason: format!("unsupported dtype {}", e.dtype),
            });
        }
        let start = e.byte_offset as usize;
        let end = start + t.len() * 4;
        let bytes = blob.get(start..end).ok_or_else(|| CheckpointError::Mismatch {
            name: e.name.clone(),
            reason: format!("bytes {start}..{end} beyond weight file of {} bytes", blob.len()),
        })?;
        for (v, chunk) in t.data_mut().iter_mut().zip(bytes.chunks_exact(4)) {
            *v = f64::from(f32::from_le_bytes(chunk.try_into().expect("4-byte chunk")));
        }
    }
    Ok(())
}

/// Optimizer moments are kept at full precision so resumed runs continue bitwise.
pub fn save_adam(state: &AdamState, path: &Path) -> Result<(), CheckpointError> {
    let mut blob = Vec::new();
    blob.extend_from_slice(&state.step.to_le_bytes());
    for buf in state.m.iter().chain(&state.v) {
        for v in buf {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, blob).map_err(io_err(path))
}

pub fn load_adam(state: &mut AdamState, path: &Path) -> Result<(), CheckpointError> {
    let blob = fs::read(path).map_err(io_err(path))?;
    let expected = 8 + 16 * state.m.iter().map(Vec::len).sum::<usize>();
    if blob.len() != expected {
        return Err(CheckpointError::Format(format!(
            "{}: optimizer state is {} bytes, expected {expected}",
            path.display(),
            blob.len()
        )));
    }
    state.step = u64::from_le_bytes(blob[..8].try_into().expect("8 bytes"));
    let mut words = blob[8..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    for buf in state.m.iter_mut().chain(state.v.iter_mut()) {
        for v in buf.iter_mut() {
            *v = words.next().expect("length checked");
        }
    }
    Ok(())
}
