//! Simulates a 64-beam scan of a procedural scene and optionally writes the
//! cloud to disk.
//!
//! Usage: lidar_scan [seed] [out.lidar]

use voxdiff::lidar::{default_sensor, simulate, RangeJitter};
use voxdiff::toy::procedural_scene;

fn main() -> voxdiff::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map_or(0, |a| a.parse().expect("numeric seed"));
    let scene = procedural_scene(seed, [64, 64, 16])?;
    let sensor = default_sensor("64-beam")?.with_origin([0.1, 0.1, 1.0]);
    let cloud = simulate(&scene, &sensor)?;
    println!("{} rays, {} returns from {} voxels", sensor.num_rays(), cloud.len(), scene.len());
    let mut per_class = std::collections::BTreeMap::new();
    for &l in &cloud.labels {
        *per_class.entry(l).or_insert(0usize) += 1;
    }
    for (l, n) in per_class {
        println!("class {l}: {n} points");
    }
    let noisy = simulate(&scene, &sensor.with_jitter(Some(RangeJitter { std_m: 0.02, seed })))?;
    let shift = cloud.points.iter().zip(&noisy.points).map(|(a, b)| (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>().sqrt());
    println!("mean jitter displacement {:.4} m", shift.sum::<f64>() / cloud.len().max(1) as f64);
    if let Some(path) = args.next() {
        cloud.save(&path)?;
        println!("wrote {path}");
    }
    Ok(())
}
