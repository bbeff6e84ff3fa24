//! Checkpoint container.
//!
//! Layout: the 8 magic bytes `PXSBCKPT`, a little-endian `u64` header length,
//! the JSON header, then the payload. Every tensor occupies one contiguous
//! block of little-endian `f32` values at the byte offset (relative to the
//! payload start) recorded in the header.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::param::ParamStore;
use crate::{numel, Result, Scalar, TensorError};

pub const MAGIC: &[u8; 8] = b"PXSBCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub len: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub kind: String,
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// An in-memory checkpoint: header metadata plus named `f32` tensors.
#[derive(Clone, Debug, Default)]
pub struct Checkpoint {
    pub kind: String,
    pub config: serde_json::Value,
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>, config: serde_json::Value) -> Self {
        Checkpoint {
            kind: kind.into(),
            config,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert<T: Scalar>(&mut self, name: impl Into<String>, shape: &[usize], values: &[T]) {
        let vals = values.iter().map(|v| v.to_f64_lossy() as f32).collect();
        self.tensors.insert(name.into(), (shape.to_vec(), vals));
    }

    /// Stores every parameter of `store` whose name starts with `prefix`.
    pub fn insert_params<T: Scalar>(&mut self, store: &ParamStore<T>, prefix: &str) {
        for (_, p) in store.iter() {
            if p.name.starts_with(prefix) {
                self.insert(p.name.clone(), &p.shape, &p.values);
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<(&[usize], &[f32])> {
        self.tensors.get(name).map(|(s, v)| (s.as_slice(), v.as_slice()))
    }

    /// Overwrites the values of every stored parameter that has a same-named,
    /// same-shaped tensor. Returns the number of parameters loaded.
    pub fn load_params<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<usize> {
        let ids: Vec<_> = store.ids().collect();
        let mut loaded = 0;
        for id in ids {
            let name = store.get(id).name.clone();
            if let Some((shape, vals)) = self.tensors.get(&name) {
                if *shape != store.get(id).shape {
                    return Err(TensorError::Checkpoint(format!(
                        "tensor {name} has shape {shape:?}, model expects {:?}",
                        store.get(id).shape
                    )));
                }
                for (dst, &src) in store.values_mut(id).iter_mut().zip(vals) {
                    *dst = T::lit(src as f64);
                }
                loaded += 1;
            }
        }
        Ok(loaded)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (name, (shape, vals)) in &self.tensors {
            let len = (vals.len() * 4) as u64;
            entries.push(TensorEntry {
                name: name.clone(),
                shape: shape.clone(),
                offset,
                len,
            });
            offset += len;
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            kind: self.kind.clone(),
            config: self.config.clone(),
            tensors: entries,
        };
        let header_bytes = serde_json::to_vec(&header)
            .map_err(|e| TensorError::Checkpoint(format!("header encoding: {e}")))?;
        let mut out = Vec::with_capacity(16 + header_bytes.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_bytes);
        for (_, vals) in self.tensors.values() {
            for v in vals {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| TensorError::Checkpoint(msg.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let hend = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[16..hend])
            .map_err(|e| TensorError::Checkpoint(format!("header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(TensorError::Checkpoint(format!(
                "unsupported format version {}",
                header.format_version
            )));
        }
        let payload = &bytes[hend..];
        let mut tensors = BTreeMap::new();
        for e in header.tensors {
            let start = e.offset as usize;
            let end = start + e.len as usize;
            if end > payload.len() || e.len as usize != numel(&e.shape) * 4 {
                return Err(TensorError::Checkpoint(format!(
                    "tensor {} has an inconsistent extent",
                    e.name
                )));
            }
            let vals = payload[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.insert(e.name, (e.shape, vals));
        }
        Ok(Checkpoint {
            kind: header.kind,
            config: header.config,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_records_offsets_and_payload_is_little_endian() {
        let mut c = Checkpoint::new("base", serde_json::json!({"d_model": 4}));
        c.insert("a", &[2], &[1.0f32, 2.0]);
        c.insert("b", &[1, 1], &[-3.5f64]);
        let bytes = c.to_bytes().unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header: Header = serde_json::from_slice(&bytes[16..16 + hlen]).unwrap();
        assert_eq!(header.format_version, 1);
        assert_eq!(header.tensors[0].offset, 0);
        assert_eq!(header.tensors[1].offset, 8);
        let payload = &bytes[16 + hlen..];
        assert_eq!(&payload[8..12], &(-3.5f32).to_le_bytes());
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.get("b").unwrap().1, &[-3.5]);
        assert_eq!(back.kind, "base");
    }

    #[test]
    fn rejects_garbage_and_truncation() {
        assert!(Checkpoint::from_bytes(b"nope").is_err());
        let mut c = Checkpoint::new("x", serde_json::Value::Null);
        c.insert("a", &[3], &[1.0f32, 2.0, 3.0]);
        let bytes = c.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 2]).is_err());
    }

    #[test]
    fn load_params_rejects_shape_mismatch() {
        let mut c = Checkpoint::new("x", serde_json::Value::Null);
        c.insert("w", &[3], &[1.0f32, 2.0, 3.0]);
        let mut store = ParamStore::<f64>::new();
        store.add("w", &[1, 3], vec![0.0; 3], false).unwrap();
        assert!(c.load_params(&mut store).is_err());
    }
}
