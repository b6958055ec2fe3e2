//! Self-describing checkpoint container.
//!
//! Layout: magic `VXCK`, u32 format version, u64 header length, a JSON
//! header (kind, config echo, epoch, RNG state, tensor index), then the
//! tensors as little-endian f32 in index order.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"VXCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Position of a ChaCha8 stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: hex::encode(rng.get_seed()), stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bytes = hex::decode(&self.seed).map_err(|e| Error::format(format!("rng seed: {e}")))?;
        let seed: [u8; 32] = bytes.try_into().map_err(|_| Error::format("rng seed must be 32 bytes"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|e| Error::format(format!("rng position: {e}")))?);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config: serde_json::Value,
    pub epoch: u64,
    pub rng: Option<RngState>,
    pub extra: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    config: serde_json::Value,
    epoch: u64,
    rng: Option<RngState>,
    #[serde(default)]
    extra: serde_json::Value,
    tensors: Vec<IndexEntry>,
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let mut index = Vec::with_capacity(self.tensors.len());
        for t in &self.tensors {
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(Error::ShapeMismatch(format!("tensor {} data does not match its shape", t.name)));
            }
            index.push(IndexEntry { name: t.name.clone(), shape: t.shape.clone(), offset, len: t.data.len() as u64 });
            offset += t.data.len() as u64;
        }
        let header = serde_json::to_vec(&Header {
            kind: self.kind.clone(),
            config: self.config.clone(),
            epoch: self.epoch,
            rng: self.rng.clone(),
            extra: self.extra.clone(),
            tensors: index,
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + offset as usize * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < 16 || &buf[..4] != MAGIC {
            return Err(Error::format("missing checkpoint magic"));
        }
        let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::format(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(buf[8..16].try_into().unwrap()) as usize;
        let body = buf.get(16..16 + hlen).ok_or_else(|| Error::format("truncated checkpoint header"))?;
        let header: Header = serde_json::from_slice(body)?;
        let blob = &buf[16 + hlen..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let start = e.offset as usize * 4;
            let bytes = blob
                .get(start..start + e.len as usize * 4)
                .ok_or_else(|| Error::format(format!("tensor {} runs past the end of the file", e.name)))?;
            let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
            tensors.push(NamedTensor { name: e.name, shape: e.shape, data });
        }
        Ok(Self {
            kind: header.kind,
            config: header.config,
            epoch: header.epoch,
            rng: header.rng,
            extra: header.extra,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path)?).map_err(|e| match e {
            Error::Format { reason, .. } => Error::Format { path: Some(path.to_path_buf()), reason },
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn roundtrip_with_rng() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let _: u64 = rng.random();
        let ck = Checkpoint {
            kind: "vae".into(),
            config: serde_json::json!({"levels": 3}),
            epoch: 7,
            rng: Some(RngState::capture(&rng)),
            extra: serde_json::Value::Null,
            tensors: vec![NamedTensor { name: "w".into(), shape: vec![2, 2], data: vec![1.0, -2.0, 0.5, 3.25] }],
        };
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
        let mut restored = back.rng.unwrap().restore().unwrap();
        assert_eq!(restored.random::<u64>(), rng.random::<u64>());
    }

    #[test]
    fn rejects_garbage() {
        assert!(Checkpoint::from_bytes(b"nope").is_err());
    }
}
