//! Run manifests: the resolved configuration, its fingerprint and content
//! hashes of every input and output. Manifests carry no timestamps, so
//! repeating a run with the same inputs reproduces the manifest byte for byte.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::RunConfig;
use crate::error::Result;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub args: Vec<String>,
    pub seed: u64,
    pub fingerprint: String,
    pub config: serde_json::Value,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

pub fn digest_file(path: &Path) -> Result<FileDigest> {
    let mut f = fs::File::open(path)?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    let mut bytes = 0u64;
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
        bytes += n as u64;
    }
    Ok(FileDigest { path: path.display().to_string(), sha256: hex::encode(h.finalize()), bytes })
}

/// Digests of `path` itself or of every file below it, sorted by path.
/// Manifests are skipped so a run never hashes its own record.
pub fn digest_tree(path: &Path) -> Result<Vec<FileDigest>> {
    let mut files = Vec::new();
    collect(path, &mut files)?;
    files.sort();
    files.iter().map(|p| digest_file(p)).collect()
}

fn collect(path: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if path.is_dir() {
        for e in fs::read_dir(path)? {
            collect(&e?.path(), out)?;
        }
    } else if path.is_file() && !path.to_string_lossy().ends_with(MANIFEST_FILE) {
        out.push(path.to_path_buf());
    }
    Ok(())
}

/// `<out>/manifest.json` for a directory, `<out>.manifest.json` otherwise.
pub fn manifest_path(out: &Path) -> PathBuf {
    if out.is_dir() {
        out.join(MANIFEST_FILE)
    } else {
        let mut name = out.as_os_str().to_owned();
        name.push(".");
        name.push(MANIFEST_FILE);
        PathBuf::from(name)
    }
}

impl Manifest {
    pub fn build(command: &str, args: &[String], cfg: &RunConfig, inputs: &[PathBuf], outputs: &[PathBuf]) -> Result<Self> {
        let digest = |paths: &[PathBuf]| -> Result<Vec<FileDigest>> {
            let mut v = Vec::new();
            for p in paths {
                v.extend(digest_tree(p)?);
            }
            Ok(v)
        };
        Ok(Self {
            command: command.to_string(),
            args: args.to_vec(),
            seed: cfg.run.seed,
            fingerprint: cfg.fingerprint(),
            config: serde_json::to_value(cfg.flatten())?,
            inputs: digest(inputs)?,
            outputs: digest(outputs)?,
        })
    }

    pub fn write(&self, out: &Path) -> Result<PathBuf> {
        let path = manifest_path(out);
        fs::write(&path, serde_json::to_vec_pretty(self)?)?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digests_are_sorted_and_skip_manifests() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("b"), b"bb").unwrap();
        fs::write(dir.path().join("a"), b"a").unwrap();
        fs::write(dir.path().join(MANIFEST_FILE), b"{}").unwrap();
        let d = digest_tree(dir.path()).unwrap();
        assert_eq!(d.len(), 2);
        assert!(d[0].path.ends_with('a'));
        assert_eq!(d[1].bytes, 2);
        assert_eq!(d[0].sha256, hex::encode(Sha256::digest(b"a")));
    }

    #[test]
    fn manifest_paths() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(manifest_path(dir.path()), dir.path().join(MANIFEST_FILE));
        let f = dir.path().join("model.ckpt");
        assert_eq!(manifest_path(&f), dir.path().join("model.ckpt.manifest.json"));
    }

    #[test]
    fn manifest_reflects_config() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("x"), b"x").unwrap();
        let a = RunConfig::default();
        let mut b = a.clone();
        b.vae.epochs += 1;
        let ma = Manifest::build("c", &[], &a, &[dir.path().to_path_buf()], &[]).unwrap();
        let mb = Manifest::build("c", &[], &b, &[dir.path().to_path_buf()], &[]).unwrap();
        assert_ne!(ma.fingerprint, mb.fingerprint);
        assert_eq!(ma.inputs, mb.inputs);
        assert_eq!(ma, Manifest::build("c", &[], &a, &[dir.path().to_path_buf()], &[]).unwrap());
    }
}
