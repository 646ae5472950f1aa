//! Parameter checkpoints: an 8-byte magic, a little-endian `u64` manifest
//! length, a JSON manifest naming every array, then the `f64` values
//! (little-endian, row-major) in manifest order.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use tensorformer_core::volume::write_atomic;

use crate::autodiff::{Matrix, ParamStore};
use crate::error::{NnError, Result};

pub const MAGIC: &[u8; 8] = b"TFCKPT01";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub trainable: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    params: Vec<ParamEntry>,
    metadata: Value,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub entries: Vec<ParamEntry>,
    pub values: Vec<Matrix>,
    pub metadata: Value,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, metadata: Value) -> Self {
        let entries = store
            .iter()
            .map(|p| ParamEntry {
                name: p.name.clone(),
                shape: [p.value.nrows(), p.value.ncols()],
                trainable: p.trainable,
            })
            .collect();
        Self {
            entries,
            values: store.iter().map(|p| p.value.clone()).collect(),
            metadata,
        }
    }

    /// Copies values into `store`, which must declare exactly the same
    /// names and shapes in the same order.
    pub fn apply_to(&self, store: &mut ParamStore) -> Result<()> {
        if store.len() != self.entries.len() {
            return Err(NnError::Checkpoint(format!(
                "checkpoint has {} arrays, model expects {}",
                self.entries.len(),
                store.len()
            )));
        }
        for ((p, e), v) in store.iter_mut().zip(&self.entries).zip(&self.values) {
            if p.name != e.name || [p.value.nrows(), p.value.ncols()] != e.shape {
                return Err(NnError::Checkpoint(format!(
                    "array {} {:?} does not match model array {} {:?}",
                    e.name,
                    e.shape,
                    p.name,
                    p.value.dim()
                )));
            }
            p.value.assign(v);
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&Manifest {
            params: self.entries.clone(),
            metadata: self.metadata.clone(),
        })?;
        let payload: usize = self.values.iter().map(|v| v.len()).sum();
        let mut out = Vec::with_capacity(16 + manifest.len() + 8 * payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for v in &self.values {
            for x in v.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| NnError::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16 + len).ok_or_else(|| bad("truncated manifest"))?;
        let manifest: Manifest = serde_json::from_slice(body)?;
        let mut payload = bytes[16 + len..].chunks_exact(8);
        let mut values = Vec::with_capacity(manifest.params.len());
        for e in &manifest.params {
            let n = e.shape[0] * e.shape[1];
            let data: Vec<f64> = payload
                .by_ref()
                .take(n)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if data.len() != n {
                return Err(bad("truncated payload"));
            }
            values.push(Matrix::from_shape_vec((e.shape[0], e.shape[1]), data).expect("length checked"));
        }
        if payload.next().is_some() || !payload.remainder().is_empty() {
            return Err(bad("trailing bytes after payload"));
        }
        Ok(Self {
            entries: manifest.params,
            values,
            metadata: manifest.metadata,
        })
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, store: &ParamStore, metadata: Value) -> Result<()> {
    let bytes = Checkpoint::from_store(store, metadata).to_bytes()?;
    write_atomic(path.as_ref(), &bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}

/// SHA-256 over the names, shapes and exact values of every parameter whose
/// name starts with `prefix`, as lowercase hex.
pub fn params_hash(store: &ParamStore, prefix: &str) -> String {
    let mut h = Sha256::new();
    for p in store.iter().filter(|p| p.name.starts_with(prefix)) {
        h.update(p.name.as_bytes());
        h.update([0u8]);
        h.update((p.value.nrows() as u64).to_le_bytes());
        h.update((p.value.ncols() as u64).to_le_bytes());
        for x in p.value.iter() {
            h.update(x.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
