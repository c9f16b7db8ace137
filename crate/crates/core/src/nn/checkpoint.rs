//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "NFCK" | version: u32 | manifest_len: u64 | manifest (UTF-8 JSON)
//!        | parameter blob: f64 LE, parameters concatenated in manifest order
//! ```
//!
//! The manifest lists every parameter's name, shape, offset and length (in
//! values) plus a free-form `meta` object holding the model description and
//! training configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{NnError, ParamStore};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"NFCK";

#[derive(Debug, Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    params: Vec<ParamRecord>,
    meta: Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub meta: Value,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>, NnError> {
        let mut records = Vec::with_capacity(self.params.len());
        let mut offset = 0;
        for id in self.params.ids() {
            let t = self.params.get(id);
            records.push(ParamRecord {
                name: self.params.name(id).to_string(),
                shape: t.shape().to_vec(),
                offset,
                len: t.len(),
            });
            offset += t.len();
        }
        let manifest = Manifest {
            format: "nested-factor-checkpoint".into(),
            version: CHECKPOINT_VERSION,
            params: records,
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&manifest).map_err(|e| NnError::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + json.len() + offset * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for id in self.params.ids() {
            for v in self.params.get(id).data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NnError> {
        let bad = |m: &str| NnError::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(NnError::Checkpoint(format!(
                "unsupported version {version}"
            )));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = &bytes[16..];
        if body.len() < mlen {
            return Err(bad("truncated manifest"));
        }
        let manifest: Manifest = serde_json::from_slice(&body[..mlen])
            .map_err(|e| NnError::Checkpoint(e.to_string()))?;
        let blob = &body[mlen..];
        let total: usize = manifest.params.iter().map(|p| p.len).sum();
        if blob.len() != total * 8 {
            return Err(NnError::Checkpoint(format!(
                "parameter blob holds {} bytes, manifest needs {}",
                blob.len(),
                total * 8
            )));
        }
        let mut params = ParamStore::new();
        for rec in manifest.params {
            let end = rec.offset + rec.len;
            if end > total {
                return Err(bad("parameter record out of range"));
            }
            let data = blob[rec.offset * 8..end * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(rec.shape, data)?;
            params.add(rec.name, t);
        }
        Ok(Self {
            params,
            meta: manifest.meta,
        })
    }
}

pub fn save_checkpoint(path: &Path, params: &ParamStore, meta: Value) -> Result<(), NnError> {
    let ck = Checkpoint {
        params: params.clone(),
        meta,
    };
    std::fs::write(path, ck.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, NnError> {
    let bytes = std::fs::read(path)?;
    Checkpoint::from_bytes(&bytes)
}
