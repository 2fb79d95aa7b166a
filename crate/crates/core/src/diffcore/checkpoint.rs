//! Parameter container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes   "VQAF0001"
//! json_len   u64
//! manifest   json_len bytes of UTF-8 JSON:
//!            {"tensors":[{"name","shape","dtype":"f64le"}...], "meta":{...}}
//! payload    IEEE-754 f64 values of every tensor, in manifest order
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"VQAF0001";
const DTYPE: &str = "f64le";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    tensors: Vec<TensorEntry>,
    meta: serde_json::Value,
}

/// Parameters plus free-form JSON metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value, params: ParamStore) -> Self {
        Checkpoint { meta, params }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = Manifest {
            tensors: self
                .params
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    dtype: DTYPE.to_string(),
                })
                .collect(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(16 + json.len() + 8 * self.params.scalar_count());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in self.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::parse(0, "missing VQAF0001 magic"));
        }
        let json_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let json_end = 16usize
            .checked_add(json_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::parse(8, format!("manifest length {json_len} exceeds file")))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[16..json_end])
            .map_err(|e| Error::parse(16, format!("bad manifest: {e}")))?;

        let mut offset = json_end;
        let mut params = ParamStore::new();
        for entry in manifest.tensors {
            if entry.dtype != DTYPE {
                return Err(Error::parse(
                    offset as u64,
                    format!("tensor '{}' has unsupported dtype '{}'", entry.name, entry.dtype),
                ));
            }
            let n: usize = entry.shape.iter().product();
            let end = offset + 8 * n;
            if end > bytes.len() {
                return Err(Error::parse(
                    offset as u64,
                    format!("payload of tensor '{}' truncated", entry.name),
                ));
            }
            let data = bytes[offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(entry.shape, data)
                .map_err(|e| Error::parse(offset as u64, format!("tensor '{}': {e}", entry.name)))?;
            params.insert(entry.name, t);
            offset = end;
        }
        if offset != bytes.len() {
            return Err(Error::parse(
                offset as u64,
                format!("{} trailing bytes after payload", bytes.len() - offset),
            ));
        }
        Ok(Checkpoint {
            meta: manifest.meta,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Parse { offset, message } => Error::Format {
                path: path.to_path_buf(),
                message: format!("byte {offset}: {message}"),
            },
            other => other,
        })
    }
}
