//! Tensor files: the 8-byte magic `OAPTNSR1`, a little-endian `u64` header
//! length, a JSON header (metadata block plus one entry per tensor), then
//! raw little-endian `f32` data.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 8] = b"OAPTNSR1";

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    count: usize,
    offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    #[serde(default)]
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

/// Named tensors plus a free-form JSON metadata block.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorFile {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl TensorFile {
    pub fn new(meta: serde_json::Value) -> Self {
        TensorFile { meta, tensors: Vec::new() }
    }

    pub fn with(mut self, name: &str, t: Tensor) -> Self {
        self.tensors.push((name.to_string(), t));
        self
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format(format!("tensor file has no entry {name:?}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let entries = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = Entry { name: name.clone(), dtype: "f32".into(), shape: t.shape().to_vec(), count: t.numel(), offset };
                offset += 4 * t.numel();
                e
            })
            .collect();
        let json = serde_json::to_vec(&Header { meta: self.meta.clone(), tensors: entries })?;
        let mut out = Vec::with_capacity(16 + json.len() + offset);
        out.extend_from_slice(TENSOR_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != TENSOR_MAGIC {
            return Err(Error::Format("missing OAPTNSR1 magic".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| Error::Format("truncated header".into()))?;
        let header: Header = serde_json::from_slice(body)?;
        let data = &bytes[16 + hlen..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            if e.dtype != "f32" {
                return Err(Error::Format(format!("unsupported dtype {}", e.dtype)));
            }
            if e.count != e.shape.iter().product::<usize>() {
                return Err(Error::Format(format!("entry {}: count disagrees with shape", e.name)));
            }
            let raw = data
                .get(e.offset..e.offset + 4 * e.count)
                .ok_or_else(|| Error::Format(format!("entry {} runs past end of file", e.name)))?;
            let vals = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push((e.name, Tensor::new(e.shape, vals)?));
        }
        Ok(TensorFile { meta: header.meta, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
