//! Binary checkpoint container shared by every model.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  b"EXGANCK1"
//! u64    header length, then that many bytes of JSON (sorted keys)
//! u64    tensor count
//! per tensor:
//!   u32 name length, name bytes (UTF-8)
//!   u32 rank, rank x u64 dims
//!   prod(dims) x f64
//! ```
//!
//! The header carries the model kind, its architecture descriptor and a
//! SHA-256 hash of the configuration that produced it.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"EXGANCK1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: Value,
    pub tensors: Vec<(String, Tensor)>,
}

/// Hex SHA-256 of a value's canonical JSON encoding.
pub fn config_hash<T: Serialize>(config: &T) -> String {
    let canonical = serde_json::to_value(config).and_then(|v| serde_json::to_vec(&v)).expect("config serialises");
    hex::encode(Sha256::digest(canonical))
}

/// Hex SHA-256 of raw bytes.
pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Checkpoint {
    pub fn new(kind: &str) -> Self {
        let mut header = serde_json::Map::new();
        header.insert("kind".into(), Value::String(kind.into()));
        Self {
            header: Value::Object(header),
            tensors: Vec::new(),
        }
    }

    pub fn kind(&self) -> Option<&str> {
        self.header.get("kind").and_then(Value::as_str)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        match self.kind() {
            Some(k) if k == kind => Ok(()),
            other => Err(Error::Checkpoint(format!("expected a {kind} checkpoint, found {other:?}"))),
        }
    }

    pub fn set<T: Serialize>(&mut self, key: &str, value: &T) -> Result<()> {
        let v = serde_json::to_value(value)?;
        self.header.as_object_mut().expect("header is an object").insert(key.into(), v);
        Ok(())
    }

    pub fn get<T: DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self
            .header
            .get(key)
            .ok_or_else(|| Error::Checkpoint(format!("missing header field {key:?}")))?;
        Ok(serde_json::from_value(v.clone())?)
    }

    pub fn has(&self, key: &str) -> bool {
        self.header.get(key).is_some()
    }

    pub fn push_params(&mut self, prefix: &str, params: &ParamSet) {
        for (name, t) in params.names().iter().zip(params.tensors()) {
            self.tensors.push((format!("{prefix}/{name}"), t.clone()));
        }
    }

    pub fn push_tensors(&mut self, prefix: &str, tensors: &[Tensor]) {
        for (i, t) in tensors.iter().enumerate() {
            self.tensors.push((format!("{prefix}/{i}"), t.clone()));
        }
    }

    /// Copies the `prefix/*` tensors into `params`, which must already have
    /// the matching layout.
    pub fn load_params(&self, prefix: &str, params: &mut ParamSet) -> Result<()> {
        let names: Vec<String> = params.names().to_vec();
        for (name, slot) in names.iter().zip(params.tensors_mut()) {
            let key = format!("{prefix}/{name}");
            let t = self
                .tensors
                .iter()
                .find(|(n, _)| *n == key)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))?;
            if t.shape() != slot.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {key} has shape {:?}, model expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
        }
        Ok(())
    }

    pub fn tensors_with_prefix(&self, prefix: &str) -> Vec<Tensor> {
        let p = format!("{prefix}/");
        self.tensors
            .iter()
            .filter(|(n, _)| n.starts_with(&p))
            .map(|(_, t)| t.clone())
            .collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serialises");
        let mut out = Vec::with_capacity(16 + header.len() + self.tensors.iter().map(|(_, t)| t.len() * 8 + 64).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let hlen = r.u64()? as usize;
        let header: Value = serde_json::from_slice(r.take(hlen)?)?;
        let count = r.u64()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push((name, Tensor::from_vec(&shape, data)));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after tensors".into()));
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn encode_decode_encode_is_byte_identical(
            values in proptest::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..40),
            note in "[a-z]{0,12}",
            step in any::<u32>(),
        ) {
            let mut ck = Checkpoint::new("test");
            ck.set("note", &note).unwrap();
            ck.set("step", &step).unwrap();
            ck.set("lr", &values[0]).unwrap();
            ck.tensors.push(("a/x".into(), Tensor::from_vec(&[values.len()], values.clone())));
            let bytes = ck.encode();
            let back = Checkpoint::decode(&bytes).unwrap();
            prop_assert_eq!(&back, &ck);
            prop_assert_eq!(back.encode(), bytes);
        }
    }

    #[test]
    fn truncated_input_is_an_error() {
        let mut ck = Checkpoint::new("test");
        ck.tensors.push(("t".into(), Tensor::zeros(&[3])));
        let bytes = ck.encode();
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::decode(b"nope").is_err());
    }

    #[test]
    fn params_round_trip_and_shape_guard() {
        let mut p = ParamSet::new();
        p.push("w", Tensor::from_vec(&[2], vec![1.5, -2.0]));
        let mut ck = Checkpoint::new("m");
        ck.push_params("g", &p);
        let mut q = ParamSet::new();
        q.push("w", Tensor::zeros(&[2]));
        ck.load_params("g", &mut q).unwrap();
        assert_eq!(p, q);
        let mut wrong = ParamSet::new();
        wrong.push("w", Tensor::zeros(&[3]));
        assert!(ck.load_params("g", &mut wrong).is_err());
    }
}
