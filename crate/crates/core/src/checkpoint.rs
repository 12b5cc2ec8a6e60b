//! Versioned model checkpoints.
//!
//! Layout: `SECK` magic, little-endian `u32` version, `u64` header length,
//! a JSON header, then one double-precision matrix block per tensor in
//! header order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedding::{decode_matrix, encode_matrix, MatrixPrecision};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

const MAGIC: &[u8; 4] = b"SECK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    trainable: bool,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    seed: u64,
    trained: bool,
    tensors: Vec<Entry>,
}

fn as_matrix<T: Scalar>(t: &Tensor<T>) -> Result<Tensor<T>> {
    let rows = t.shape().first().copied().unwrap_or(1);
    let cols = if rows == 0 { 0 } else { t.len() / rows };
    t.clone().reshape(vec![rows, cols])
}

pub fn encode_checkpoint<T: Scalar>(model: &Model<T>) -> Result<Vec<u8>> {
    let header = Header {
        config: model.config.clone(),
        seed: model.seed,
        trained: model.is_trained(),
        tensors: model
            .store
            .iter()
            .map(|(_, p)| Entry {
                name: p.name.clone(),
                trainable: p.trainable,
                shape: p.tensor.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, p) in model.store.iter() {
        out.extend(encode_matrix(&as_matrix(&p.tensor)?, MatrixPrecision::Double)?);
    }
    Ok(out)
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Model<T>> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic or truncated)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let end = usize::try_from(len)
        .ok()
        .and_then(|l| l.checked_add(16))
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Format("truncated checkpoint header".into()))?;
    let header: Header = serde_json::from_slice(&bytes[16..end]).map_err(|e| Error::Format(e.to_string()))?;

    let mut rebuild = header.config.clone();
    rebuild.vocab_path = None;
    let mut model = Model::<T>::new(rebuild, header.seed)?;
    model.config = header.config;
    if model.store.len() != header.tensors.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {} tensors, the configured model has {}",
            header.tensors.len(),
            model.store.len()
        )));
    }
    let mut at = end;
    for entry in &header.tensors {
        let id = model
            .store
            .id(&entry.name)
            .ok_or_else(|| Error::Format(format!("unknown tensor `{}` in checkpoint", entry.name)))?;
        let (m, used) = decode_matrix::<T>(&bytes[at..])?;
        at += used;
        let expected = model.store.tensor(id).shape().to_vec();
        if expected != entry.shape {
            return Err(Error::Format(format!(
                "tensor `{}` has shape {:?}, expected {:?}",
                entry.name, entry.shape, expected
            )));
        }
        let p = model.store.get_mut(id);
        p.tensor = m.reshape(expected)?;
        p.trainable = entry.trainable;
    }
    if at != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after checkpoint",
            bytes.len() - at
        )));
    }
    model.set_trained(header.trained);
    Ok(model)
}

pub fn save_checkpoint<T: Scalar>(model: &Model<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(model)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Model<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
