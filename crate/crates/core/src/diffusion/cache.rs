//! Latent cache files.
//!
//! Layout of a `ZLT1` file: magic, u32 version, u64 header length, a JSON
//! header (scene id, dims, latent width, encoder fingerprint), then the
//! dense latent as little-endian f32 in cell-major order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::DenseLatent;

const MAGIC: &[u8; 4] = b"ZLT1";
const VERSION: u32 = 1;
pub const EXTENSION: &str = "zlt";

#[derive(Debug, Clone, PartialEq)]
pub struct LatentRecord {
    pub id: String,
    /// Identifies the encoder (and its configuration) that produced the latent.
    pub fingerprint: String,
    pub latent: DenseLatent,
}

#[derive(Serialize, Deserialize)]
struct Header {
    id: String,
    dims: [usize; 3],
    latent_dim: usize,
    fingerprint: String,
}

pub fn encode_latent(rec: &LatentRecord) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header {
        id: rec.id.clone(),
        dims: rec.latent.dims(),
        latent_dim: rec.latent.latent_dim(),
        fingerprint: rec.fingerprint.clone(),
    })?;
    let mut out = Vec::with_capacity(16 + header.len() + rec.latent.values().len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for v in rec.latent.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_latent(buf: &[u8]) -> Result<LatentRecord> {
    if buf.len() < 16 || &buf[..4] != MAGIC {
        return Err(Error::format("missing ZLT1 magic"));
    }
    let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::format(format!("unsupported latent version {version}")));
    }
    let hlen = u64::from_le_bytes(buf[8..16].try_into().unwrap()) as usize;
    let body = buf.get(16..16 + hlen).ok_or_else(|| Error::format("truncated latent header"))?;
    let h: Header = serde_json::from_slice(body)?;
    let blob = &buf[16 + hlen..];
    let expected = h.dims.iter().product::<usize>() * h.latent_dim * 4;
    if blob.len() != expected {
        return Err(Error::format(format!("latent payload has {} bytes, expected {expected}", blob.len())));
    }
    let values = blob.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
    Ok(LatentRecord { id: h.id, fingerprint: h.fingerprint, latent: DenseLatent::from_values(h.dims, h.latent_dim, values)? })
}

/// Writes `<dir>/<id>.zlt` and returns its path.
pub fn write_latent(dir: impl AsRef<Path>, rec: &LatentRecord) -> Result<PathBuf> {
    if rec.id.is_empty() || rec.id.contains(['/', '\\']) {
        return Err(Error::RejectedInput(format!("invalid scene id {:?}", rec.id)));
    }
    let path = dir.as_ref().join(format!("{}.{EXTENSION}", rec.id));
    fs::write(&path, encode_latent(rec)?)?;
    Ok(path)
}

pub fn read_latent(path: impl AsRef<Path>) -> Result<LatentRecord> {
    let path = path.as_ref();
    decode_latent(&fs::read(path)?).map_err(|e| match e {
        Error::Format { reason, .. } => Error::Format { path: Some(path.to_path_buf()), reason },
        other => other,
    })
}

/// Every `.zlt` file in `dir`, sorted by id. All records must share the
/// same fingerprint and shape.
pub fn read_latent_dir(dir: impl AsRef<Path>) -> Result<Vec<LatentRecord>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir.as_ref())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == EXTENSION))
        .collect();
    paths.sort();
    let mut out: Vec<LatentRecord> = paths.iter().map(read_latent).collect::<Result<_>>()?;
    out.sort_by(|a, b| a.id.cmp(&b.id));
    if let Some(first) = out.first() {
        for r in &out[1..] {
            if r.fingerprint != first.fingerprint {
                return Err(Error::format(format!(
                    "latent {} was produced by a different encoder ({} vs {})",
                    r.id, r.fingerprint, first.fingerprint
                )));
            }
            if r.latent.dims() != first.latent.dims() || r.latent.latent_dim() != first.latent.latent_dim() {
                return Err(Error::format(format!("latent {} has a different shape", r.id)));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, fp: &str) -> LatentRecord {
        let values = (0..2 * 2 * 1 * 3).map(|i| i as f32 * 0.5 - 1.0).collect();
        LatentRecord { id: id.into(), fingerprint: fp.into(), latent: DenseLatent::from_values([2, 2, 1], 3, values).unwrap() }
    }

    #[test]
    fn roundtrip_and_directory() {
        let dir = tempfile::tempdir().unwrap();
        write_latent(dir.path(), &rec("b", "x")).unwrap();
        write_latent(dir.path(), &rec("a", "x")).unwrap();
        let all = read_latent_dir(dir.path()).unwrap();
        assert_eq!(all.iter().map(|r| r.id.as_str()).collect::<Vec<_>>(), ["a", "b"]);
        assert_eq!(all[0], rec("a", "x"));
        write_latent(dir.path(), &rec("c", "y")).unwrap();
        assert!(read_latent_dir(dir.path()).is_err());
    }

    #[test]
    fn rejects_truncation_and_bad_ids() {
        let bytes = encode_latent(&rec("a", "x")).unwrap();
        assert!(decode_latent(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_latent(b"ZLT0").is_err());
        let dir = tempfile::tempdir().unwrap();
        assert!(write_latent(dir.path(), &rec("../a", "x")).is_err());
    }
}
