//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "SDRL"            4-byte magic
//! version           u32
//! config digest     32 bytes, SHA-256 of the encoder config as JSON
//! record count      u32
//! per record:
//!   name length u32, name (UTF-8)
//!   ndim u32, ndim x u64 extents
//!   numel x f32 values
//! ```
//!
//! Records cover every parameter and every batch-norm running statistic.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"SDRL";
pub const FORMAT_VERSION: u32 = 1;

pub type ConfigDigest = [u8; 32];

pub fn config_digest<T: Serialize>(cfg: &T) -> ConfigDigest {
    let json = serde_json::to_vec(cfg).expect("config serializes");
    Sha256::digest(&json).into()
}

pub fn encoder_digest(cfg: &EncoderConfig) -> ConfigDigest {
    config_digest(cfg)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub digest: ConfigDigest,
    pub tensors: Vec<(String, Tensor)>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CheckpointIncompatible(msg.into())
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, digest: ConfigDigest) -> Self {
        Self {
            digest,
            tensors: store.named_tensors().map(|(n, t)| (n.to_string(), t.clone())).collect(),
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&self.digest)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.ndim() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let io = |e: std::io::Error| corrupt(format!("truncated or unreadable: {e}"));
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = read_u32(r).map_err(io)?;
        if version != FORMAT_VERSION {
            return Err(corrupt(format!("format version {version}, expected {FORMAT_VERSION}")));
        }
        let mut digest = [0u8; 32];
        r.read_exact(&mut digest).map_err(io)?;
        let count = read_u32(r).map_err(io)? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let len = read_u32(r).map_err(io)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name).map_err(io)?;
            let name = String::from_utf8(name).map_err(|_| corrupt("record name is not UTF-8"))?;
            let ndim = read_u32(r).map_err(io)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let mut b = [0u8; 8];
                r.read_exact(&mut b).map_err(io)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let numel: usize = shape.iter().product();
            let mut raw = vec![0u8; numel * 4];
            r.read_exact(&mut raw).map_err(io)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| corrupt(format!("record {name}: {e}")))?;
            tensors.push((name, t));
        }
        Ok(Self { digest, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::DataMissing(format!("checkpoint {}: {e}", path.display())))?;
        Self::read_from(&mut BufReader::new(file))
    }

    /// Copies every record whose name starts with `prefix` into `store`. All
    /// store entries under the prefix must be present with identical shapes.
    pub fn load_into(&self, store: &mut ParamStore, prefix: &str, expected: &ConfigDigest) -> Result<usize> {
        if &self.digest != expected {
            return Err(corrupt("encoder configuration digest differs"));
        }
        let by_name: HashMap<&str, &Tensor> = self.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let wanted: Vec<String> = store
            .named_tensors()
            .map(|(n, _)| n.to_string())
            .filter(|n| n.starts_with(prefix))
            .collect();
        for name in &wanted {
            let src = by_name.get(name.as_str()).ok_or_else(|| corrupt(format!("missing record {name}")))?;
            let dst = store.tensor_by_name_mut(name).expect("name from store");
            if dst.shape() != src.shape() {
                return Err(corrupt(format!("{name}: shape {:?} vs {:?}", src.shape(), dst.shape())));
            }
            *dst = (*src).clone();
        }
        Ok(wanted.len())
    }
}
