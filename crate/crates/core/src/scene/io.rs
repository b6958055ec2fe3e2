//! `VSC1` scene files: little-endian magic, 7 f64 grid values
//! (min xyz, max xyz, resolution), u32 class count, u32 voxel count, then
//! `(u16 i, u16 j, u16 k, u8 label)` per voxel.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use super::{GridSpec, VoxelScene};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"VSC1";
pub const EXTENSION: &str = "vsc";

pub fn write_scene<W: Write>(scene: &VoxelScene, mut w: W) -> Result<()> {
    w.write_all(&encode_scene(scene))?;
    Ok(())
}

pub fn encode_scene(scene: &VoxelScene) -> Vec<u8> {
    let g = scene.grid();
    let mut buf = Vec::with_capacity(4 + 56 + 8 + scene.len() * 7);
    buf.extend_from_slice(MAGIC);
    for v in g.min_corner().into_iter().chain(g.max_corner()).chain([g.resolution()]) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&u32::from(scene.num_classes()).to_le_bytes());
    buf.extend_from_slice(&(scene.len() as u32).to_le_bytes());
    for (c, label) in scene.iter() {
        for x in c {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        buf.push(label);
    }
    buf
}

pub fn read_scene<R: Read>(mut r: R) -> Result<VoxelScene> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    decode_scene(&buf)
}

pub fn decode_scene(buf: &[u8]) -> Result<VoxelScene> {
    let mut cur = Cursor { buf, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::format("missing VSC1 magic"));
    }
    let mut g = [0f64; 7];
    for v in &mut g {
        *v = f64::from_le_bytes(cur.take(8)?.try_into().unwrap());
    }
    let grid = GridSpec::new([g[0], g[1], g[2]], [g[3], g[4], g[5]], g[6])?;
    let classes = cur.u32()?;
    let classes = u8::try_from(classes).map_err(|_| Error::format(format!("class count {classes} exceeds 255")))?;
    let n = cur.u32()? as usize;
    if buf.len() - cur.pos != n * 7 {
        return Err(Error::format(format!(
            "expected {} voxel bytes, found {}",
            n * 7,
            buf.len() - cur.pos
        )));
    }
    let mut coords = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let rec = cur.take(7)?;
        coords.push([
            u16::from_le_bytes([rec[0], rec[1]]),
            u16::from_le_bytes([rec[2], rec[3]]),
            u16::from_le_bytes([rec[4], rec[5]]),
        ]);
        labels.push(rec[6]);
    }
    VoxelScene::new(grid, classes, coords, labels)
}

pub fn save_scene(scene: &VoxelScene, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_scene(scene))?;
    Ok(())
}

pub fn load_scene(path: impl AsRef<Path>) -> Result<VoxelScene> {
    let path = path.as_ref();
    let buf = fs::read(path)?;
    decode_scene(&buf).map_err(|e| match e {
        Error::Format { reason, .. } => Error::Format { path: Some(path.to_path_buf()), reason },
        other => other,
    })
}

/// `(id, path)` of every `.vsc` file in `dir`, sorted by id.
pub fn list_scenes(dir: impl AsRef<Path>) -> Result<Vec<(String, PathBuf)>> {
    let dir = dir.as_ref();
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::NotFound(format!("{}: {e}", dir.display())))? {
        let path = entry?.path();
        if path.extension().is_some_and(|x| x == EXTENSION) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.push((stem.to_string(), path));
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Writes `<dir>/<id>.vsc`, creating `dir` if needed.
pub fn save_scene_as(scene: &VoxelScene, dir: impl AsRef<Path>, id: &str) -> Result<PathBuf> {
    if id.is_empty() || id.contains(['/', '\\']) {
        return Err(Error::RejectedInput(format!("invalid scene id {id:?}")));
    }
    std::fs::create_dir_all(dir.as_ref())?;
    let path = dir.as_ref().join(format!("{id}.{EXTENSION}"));
    save_scene(scene, &path)?;
    Ok(path)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format("truncated scene file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip() {
        let grid = GridSpec::new([-1.0, -1.0, 0.0], [1.0, 1.0, 0.5], 0.1).unwrap();
        let s = VoxelScene::new(grid, 4, vec![[3, 1, 2], [0, 0, 0]], vec![4, 1]).unwrap();
        let bytes = encode_scene(&s);
        assert_eq!(&bytes[..4], b"VSC1");
        assert_eq!(bytes.len(), 4 + 56 + 8 + 14);
        assert_eq!(decode_scene(&bytes).unwrap(), s);
    }

    #[test]
    fn truncated_is_rejected() {
        let grid = GridSpec::from_dims([0.0; 3], [2, 2, 2], 1.0).unwrap();
        let s = VoxelScene::new(grid, 2, vec![[1, 1, 1]], vec![2]).unwrap();
        let bytes = encode_scene(&s);
        assert!(decode_scene(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_scene(b"VSC0").is_err());
    }
}
