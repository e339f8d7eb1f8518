//! Named parameter storage and the checkpoint file format.
//!
//! A checkpoint is one JSON manifest line (names, shapes, dtype) terminated
//! by `\n`, followed by the little-endian `f64` payload of every tensor in
//! manifest order.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "ductms-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Ordered map from parameter name to tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize, Debug)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    dtype: String,
    tensors: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize, Debug)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
}

fn ckpt_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(TensorError::Checkpoint(msg.into()))
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces `name`.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.tensors[i] = value,
            None => {
                self.index.insert(name.clone(), self.names.len());
                self.names.push(name);
                self.tensors.push(value);
            }
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index
            .get(name)
            .map(|&i| &self.tensors[i])
            .ok_or_else(|| TensorError::Usage(format!("unknown parameter '{}'", name)))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.tensors[i]),
            None => Err(TensorError::Usage(format!("unknown parameter '{}'", name))),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|s| s.as_str()).zip(&self.tensors)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total number of scalar entries.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Copies every entry of `other` into `self`, prefixing names.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamStore) {
        for (n, t) in other.iter() {
            self.insert(format!("{}{}", prefix, n), t.clone());
        }
    }

    /// Entries whose names start with `prefix`, with the prefix stripped.
    pub fn strip_prefix(&self, prefix: &str) -> ParamStore {
        let mut out = ParamStore::new();
        for (n, t) in self.iter() {
            if let Some(rest) = n.strip_prefix(prefix) {
                out.insert(rest, t.clone());
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = Manifest {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            dtype: "f64le".to_string(),
            tensors: self
                .iter()
                .map(|(n, t)| ManifestEntry {
                    name: n.to_string(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let mut out = serde_json::to_vec(&manifest).expect("manifest serialises");
        out.push(b'\n');
        for t in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let Some(nl) = bytes.iter().position(|&b| b == b'\n') else {
            return ckpt_err("missing manifest terminator");
        };
        let manifest: Manifest =
            serde_json::from_slice(&bytes[..nl]).map_err(|e| TensorError::Checkpoint(format!("manifest: {}", e)))?;
        if manifest.format != CHECKPOINT_FORMAT {
            return ckpt_err(format!("unexpected format '{}'", manifest.format));
        }
        if manifest.version != CHECKPOINT_VERSION {
            return ckpt_err(format!("unsupported version {}", manifest.version));
        }
        if manifest.dtype != "f64le" {
            return ckpt_err(format!("unsupported dtype '{}'", manifest.dtype));
        }
        let payload = &bytes[nl + 1..];
        let mut total = 0usize;
        for e in &manifest.tensors {
            let n = e
                .shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| TensorError::Checkpoint(format!("shape overflow for '{}'", e.name)))?;
            total = total
                .checked_add(n)
                .ok_or_else(|| TensorError::Checkpoint("payload size overflow".into()))?;
        }
        if total.checked_mul(8) != Some(payload.len()) {
            return ckpt_err(format!(
                "payload has {} bytes, manifest needs {} values",
                payload.len(),
                total
            ));
        }
        let mut store = ParamStore::new();
        let mut values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
        for e in manifest.tensors {
            if store.contains(&e.name) {
                return ckpt_err(format!("duplicate tensor '{}'", e.name));
            }
            let n: usize = e.shape.iter().product();
            let data: Vec<f64> = values.by_ref().take(n).collect();
            if data.iter().any(|v| !v.is_finite()) {
                return ckpt_err(format!("non-finite value in '{}'", e.name));
            }
            store.insert(e.name, Tensor::new(e.shape, data)?);
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_bytes())
            .map_err(|e| TensorError::Checkpoint(format!("{}: {}", path.as_ref().display(), e)))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path.as_ref())
            .map_err(|e| TensorError::Checkpoint(format!("{}: {}", path.as_ref().display(), e)))?;
        Self::from_bytes(&bytes)
    }
}
