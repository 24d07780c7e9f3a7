//! Parameter checkpoints: the 8-byte magic `OAPCKPT1`, a little-endian `u64`
//! header length, a UTF-8 JSON header, then raw little-endian `f32` data.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"OAPCKPT1";

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the data section.
    offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    arch: String,
    #[serde(default)]
    meta: serde_json::Value,
    params: Vec<ParamEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub arch: String,
    pub meta: serde_json::Value,
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(arch: impl Into<String>, meta: serde_json::Value, params: Vec<(String, Tensor)>) -> Self {
        Checkpoint { arch: arch.into(), meta, params }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let entries = self
            .params
            .iter()
            .map(|(name, t)| {
                let e = ParamEntry { name: name.clone(), shape: t.shape().to_vec(), offset };
                offset += 4 * t.numel();
                e
            })
            .collect();
        let header = Header { arch: self.arch.clone(), meta: self.meta.clone(), params: entries };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + offset);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.params {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::Format("missing OAPCKPT1 magic".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| Error::Format("truncated header".into()))?;
        let header: Header = serde_json::from_slice(body)?;
        let data = &bytes[16 + hlen..];
        let mut params = Vec::with_capacity(header.params.len());
        for e in header.params {
            let n: usize = e.shape.iter().product();
            let raw = data
                .get(e.offset..e.offset + 4 * n)
                .ok_or_else(|| Error::Format(format!("parameter {} runs past end of file", e.name)))?;
            let vals = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            params.push((e.name, Tensor::new(e.shape, vals)?));
        }
        Ok(Checkpoint { arch: header.arch, meta: header.meta, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(vals in proptest::collection::vec(any::<f32>(), 1..40), split in 1usize..8) {
            let cut = split.min(vals.len());
            let a = Tensor::new(vec![cut], vals[..cut].to_vec()).unwrap();
            let mut params = vec![("a".to_string(), a)];
            if cut < vals.len() {
                params.push(("b".to_string(), Tensor::new(vec![vals.len() - cut, 1], vals[cut..].to_vec()).unwrap()));
            }
            let ck = Checkpoint::new("mlp-2d", serde_json::json!({"classes": 2}), params);
            let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
            prop_assert_eq!(back.arch, ck.arch);
            for ((_, x), (_, y)) in back.params.iter().zip(&ck.params) {
                let xb: Vec<u32> = x.data().iter().map(|v| v.to_bits()).collect();
                let yb: Vec<u32> = y.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(xb, yb);
            }
        }
    }

    #[test]
    fn rejects_bad_magic() {
        assert!(Checkpoint::from_bytes(b"NOTACKPT\0\0\0\0\0\0\0\0").is_err());
    }
}
