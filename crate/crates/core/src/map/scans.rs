//! Scan directories: `NNNNNN.bin` holds little-endian f32 xyz triplets,
//! `NNNNNN.label` one u8 class id per point, and a poses file lists one
//! row-major 4x4 matrix (16 numbers) per line, in scan order.

use std::fs;
use std::path::{Path, PathBuf};

use super::{PosedScan, RigidTransform};
use crate::error::{Error, Result};
use crate::scene::Point3;

pub fn read_poses(path: &Path) -> Result<Vec<RigidTransform>> {
    let text = fs::read_to_string(path)?;
    let bad = |line: usize, reason: String| Error::Format {
        path: Some(path.to_path_buf()),
        reason: format!("line {line}: {reason}"),
    };
    let mut poses = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| bad(n + 1, format!("{e}")))?;
        let m: [f64; 16] = vals
            .try_into()
            .map_err(|v: Vec<f64>| bad(n + 1, format!("expected 16 values, found {}", v.len())))?;
        poses.push(RigidTransform::from_row_major(&m).map_err(|e| bad(n + 1, e.to_string()))?);
    }
    Ok(poses)
}

pub fn write_poses(path: &Path, poses: &[RigidTransform]) -> Result<()> {
    let mut out = String::new();
    for p in poses {
        let row: Vec<String> = p.to_row_major().iter().map(|v| format!("{v:e}")).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads every `*.bin` scan in `dir` (sorted by name) and pairs it with the
/// pose on the matching line of `poses`.
pub fn read_scan_dir(dir: &Path, poses: &Path) -> Result<Vec<PosedScan>> {
    let mut bins: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "bin"))
        .collect();
    bins.sort();
    let poses = read_poses(poses)?;
    if poses.len() != bins.len() {
        return Err(Error::format(format!("{} scans but {} poses", bins.len(), poses.len())));
    }
    bins.iter()
        .zip(poses)
        .map(|(bin, pose)| {
            let id = bin.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            let points = read_points(bin)?;
            let labels = fs::read(bin.with_extension("label"))?;
            if labels.len() != points.len() {
                return Err(Error::Format {
                    path: Some(bin.clone()),
                    reason: format!("{} points but {} labels", points.len(), labels.len()),
                });
            }
            PosedScan::new(id, points, labels, pose)
        })
        .collect()
}

/// Writes scans as `000000.bin`/`000000.label`, ... plus `poses.txt`.
pub fn write_scan_dir(dir: &Path, scans: &[PosedScan]) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    for (i, scan) in scans.iter().enumerate() {
        let stem = dir.join(format!("{i:06}"));
        write_points(&stem.with_extension("bin"), &scan.points)?;
        fs::write(stem.with_extension("label"), &scan.labels)?;
    }
    let poses = dir.join("poses.txt");
    write_poses(&poses, &scans.iter().map(|s| s.pose).collect::<Vec<_>>())?;
    Ok(poses)
}

pub fn read_points(path: &Path) -> Result<Vec<Point3>> {
    let bytes = fs::read(path)?;
    if bytes.len() % 12 != 0 {
        return Err(Error::Format {
            path: Some(path.to_path_buf()),
            reason: format!("{} bytes is not a whole number of xyz records", bytes.len()),
        });
    }
    Ok(bytes
        .chunks_exact(12)
        .map(|r| {
            let f = |o: usize| f32::from_le_bytes(r[o..o + 4].try_into().unwrap()) as f64;
            [f(0), f(4), f(8)]
        })
        .collect())
}

pub fn write_points(path: &Path, points: &[Point3]) -> Result<()> {
    let mut buf = Vec::with_capacity(points.len() * 12);
    for p in points {
        for v in p {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scan_dir_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let scans = vec![
            PosedScan::new("a", vec![[1.0, 2.0, 3.0]], vec![9], RigidTransform::from_yaw(0.5, [1.0, 0.0, 0.0])).unwrap(),
            PosedScan::new("b", vec![[0.5, 0.5, 0.5], [0.0, 0.0, 0.25]], vec![11, 9], RigidTransform::identity())
                .unwrap(),
        ];
        let poses = write_scan_dir(dir.path(), &scans).unwrap();
        let back = read_scan_dir(dir.path(), &poses).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].points, scans[1].points);
        assert_eq!(back[1].labels, scans[1].labels);
        assert_eq!(back[0].id, "000000");
        let p = [1.0, 1.0, 1.0];
        let (x, y) = (back[0].pose.apply(p), scans[0].pose.apply(p));
        assert!((0..3).all(|a| (x[a] - y[a]).abs() < 1e-12));
    }

    #[test]
    fn bad_pose_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("poses.txt");
        fs::write(&path, "1 0 0 0 0 1 0 0 0 0 1 0\n").unwrap();
        assert!(read_poses(&path).is_err());
    }
}
