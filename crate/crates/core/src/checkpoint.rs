//! Self-describing weight container.
//!
//! ```text
//! b"HGCKPT\0\0"            magic
//! u32 LE                   format version
//! u64 LE                   header length in bytes
//! header                   JSON {"metadata": .., "tensors": [{"name", "shape"}, ..]}
//! f64 LE values            tensors concatenated in header order
//! ```
//!
//! Tensors are written in name order and JSON objects are key-sorted, so
//! saving a loaded checkpoint reproduces the file byte for byte.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::IxDyn;
use serde::{Deserialize, Serialize};

use crate::autograd::Array;
use crate::error::{Error, Result};
use crate::imaging::ensure_parent;
use crate::params::ParamStore;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"HGCKPT\0\0";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub metadata: serde_json::Value,
    pub tensors: ParamStore,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    metadata: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let header = Header {
        metadata: ckpt.metadata.clone(),
        tensors: ckpt
            .tensors
            .iter()
            .map(|(n, a)| TensorEntry {
                name: n.clone(),
                shape: a.shape().to_vec(),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(header.len() + 8 * ckpt.tensors.num_scalars() + 20);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, a) in ckpt.tensors.iter() {
        for v in a.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8], origin: &Path) -> Result<Checkpoint> {
    let bad = |reason: &str| Error::Checkpoint {
        path: origin.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = &bytes[20..];
    if body.len() < hlen {
        return Err(bad("truncated header"));
    }
    let header: Header = serde_json::from_slice(&body[..hlen])?;
    let mut data = &body[hlen..];
    let mut tensors = ParamStore::new();
    for t in header.tensors {
        let n: usize = t.shape.iter().product();
        if data.len() < 8 * n {
            return Err(bad(&format!("truncated data for `{}`", t.name)));
        }
        let vals: Vec<f64> = data[..8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        data = &data[8 * n..];
        tensors.insert(t.name, Array::from_shape_vec(IxDyn(&t.shape), vals).unwrap());
    }
    if !data.is_empty() {
        return Err(bad("trailing bytes after tensor data"));
    }
    Ok(Checkpoint {
        metadata: header.metadata,
        tensors,
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    ensure_parent(path)?;
    let bytes = encode_checkpoint(ckpt)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

/// Tensors under `prefix`, with the prefix removed.
pub fn section(ckpt: &Checkpoint, prefix: &str) -> ParamStore {
    ckpt.tensors.sub_store(prefix)
}
