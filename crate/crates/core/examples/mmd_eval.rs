//! Compares scene sets by MMD over per-scene class histograms and by class
//! distribution.
//!
//! Usage: mmd_eval [scenes per set]

use voxdiff::eval::{class_distribution, mmd, Estimator, FeatureSet, Kernel};
use voxdiff::scene::VoxelScene;
use voxdiff::toy::{procedural_scene, NUM_TOY_CLASSES};

fn features(scenes: &[VoxelScene]) -> voxdiff::Result<FeatureSet> {
    let rows: Vec<Vec<f64>> = scenes
        .iter()
        .map(|s| {
            let mut h = vec![0.0; NUM_TOY_CLASSES as usize];
            for &l in s.labels() {
                h[l as usize - 1] += 1.0 / s.len() as f64;
            }
            h
        })
        .collect();
    FeatureSet::new(&rows)
}

fn main() -> voxdiff::Result<()> {
    let n: u64 = std::env::args().nth(1).map_or(16, |a| a.parse().expect("numeric count"));
    let a: Vec<_> = (0..n).map(|s| procedural_scene(s, [64, 64, 16])).collect::<voxdiff::Result<_>>()?;
    let b: Vec<_> = (n..2 * n).map(|s| procedural_scene(s, [64, 64, 16])).collect::<voxdiff::Result<_>>()?;
    let flat: Vec<_> = (0..n).map(|s| procedural_scene(s, [64, 64, 4])).collect::<voxdiff::Result<_>>()?;
    let (fa, fb, ff) = (features(&a)?, features(&b)?, features(&flat)?);
    for kernel in [Kernel::RbfMedian, Kernel::Linear] {
        println!(
            "{kernel:?}: same generator {:.4}, truncated height {:.4}",
            mmd(&fa, &fb, kernel, Estimator::Biased)?,
            mmd(&fa, &ff, kernel, Estimator::Biased)?
        );
    }
    for (name, set) in [("tall", &a), ("truncated", &flat)] {
        let d = class_distribution(set)?;
        println!("{name}: {}", d.iter().map(|x| format!("{:.1}%", 100.0 * x)).collect::<Vec<_>>().join(" "));
    }
    Ok(())
}
