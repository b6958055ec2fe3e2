//! Simulates a drive through a procedural world, aggregates the posed scans
//! into a static map and crops training scenes around each pose.
//!
//! Usage: build_map [scans]

use std::collections::BTreeSet;

use voxdiff::lidar::{default_sensor, simulate};
use voxdiff::map::{aggregate, auto_map_grid, crop_at_pose, PosedScan, RigidTransform};
use voxdiff::scene::GridSpec;
use voxdiff::toy::{procedural_scene, NUM_TOY_CLASSES, TOY_RESOLUTION};

fn main() -> voxdiff::Result<()> {
    let n: usize = std::env::args().nth(1).map_or(5, |a| a.parse().expect("numeric scan count"));
    let world = procedural_scene(11, [128, 128, 16])?;
    let sensor = default_sensor("64-beam")?;
    let mut scans = Vec::new();
    for i in 0..n {
        let yaw = 0.3 * i as f64;
        let pose = RigidTransform::from_yaw(yaw, [-6.0 + 12.0 * i as f64 / n.max(2) as f64 - 1.0, 0.5, 1.0]);
        let cloud = simulate(&world, &sensor.clone().with_origin(pose.apply([0.0; 3])))?;
        let to_local = pose.inverse();
        let local = cloud.points.iter().map(|&p| to_local.apply(p)).collect();
        scans.push(PosedScan::new(format!("{i:06}"), local, cloud.labels, pose)?);
        println!("scan {i}: {} points", scans[i].len());
    }
    let none = BTreeSet::new();
    let grid = auto_map_grid(&scans, &none, TOY_RESOLUTION)?;
    let map = aggregate(&scans, &grid, &none, NUM_TOY_CLASSES)?;
    println!("map {:?} cells, {} occupied", grid.dims(), map.scene().len());
    let crop = GridSpec::from_dims([-6.4, -6.4, -1.4], [64, 64, 16], TOY_RESOLUTION)?;
    for s in &scans {
        let scene = crop_at_pose(&map, &s.pose, &crop)?;
        let hist = scene.labels().iter().fold([0usize; 5], |mut h, &l| {
            h[l as usize] += 1;
            h
        });
        println!("crop {}: {} voxels, per class {:?}", s.id, scene.len(), &hist[1..]);
    }
    Ok(())
}
