//! Parameter checkpoint file.
//!
//! ```text
//! magic    8 bytes  "SMAECKPT"
//! version  u32 LE
//! hlen     u64 LE   length of the JSON header
//! header   hlen bytes of UTF-8 JSON:
//!          {"version", "config_hash", "config", "tensors": [{"name","shape","offset","len"}]}
//! payload  little-endian f32 values; `offset`/`len` count f32 elements
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SMAECKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    config_hash: String,
    config: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config_hash: String,
    pub config: serde_json::Value,
    pub params: ParamStore<f32>,
}

impl Checkpoint {
    pub fn new<T: Real>(params: &ParamStore<T>, config: serde_json::Value, config_hash: String) -> Self {
        Self {
            config_hash,
            config,
            params: params.cast(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = Vec::with_capacity(self.params.len());
        let mut offset = 0;
        for (_, p) in self.params.iter() {
            tensors.push(TensorEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                offset,
                len: p.value.len(),
            });
            offset += p.value.len();
        }
        let header = Header {
            version: VERSION,
            config_hash: self.config_hash.clone(),
            config: self.config.clone(),
            tensors,
        };
        let header = serde_json::to_vec(&header)?;

        let mut buf = Vec::with_capacity(20 + header.len() + offset * 4);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
        buf.extend_from_slice(&header);
        for (_, p) in self.params.iter() {
            for &v in p.value.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        let payload = &bytes[20 + hlen..];
        if payload.len() % 4 != 0 {
            return Err(bad("payload is not a whole number of f32 values"));
        }
        let floats: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();

        let mut params = ParamStore::new();
        for t in &header.tensors {
            let data = floats
                .get(t.offset..t.offset + t.len)
                .ok_or_else(|| bad(&format!("tensor `{}` exceeds payload", t.name)))?;
            params.insert(t.name.clone(), Tensor::new(&t.shape, data.to_vec())?)?;
        }
        Ok(Self {
            config_hash: header.config_hash,
            config: header.config,
            params,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_names_shapes_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut store = ParamStore::<f32>::new();
        store
            .insert("a.w", Tensor::new(&[2, 2], vec![1.0, -2.0, 3.5, 0.25]).unwrap())
            .unwrap();
        store.insert("b", Tensor::new(&[3], vec![7.0, 8.0, 9.0]).unwrap()).unwrap();
        let ck = Checkpoint::new(&store, serde_json::json!({"k": 1}), "abc".into());
        ck.save(&path).unwrap();

        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.config_hash, "abc");
        assert_eq!(back.config["k"], 1);
        let names: Vec<_> = back.params.names().collect();
        assert_eq!(names, ["a.w", "b"]);
        assert_eq!(back.params.by_name("a.w").unwrap().value, store.by_name("a.w").unwrap().value);
    }

    #[test]
    fn rejects_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x");
        fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Checkpoint { .. })));
    }
}
