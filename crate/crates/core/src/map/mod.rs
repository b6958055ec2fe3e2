//! Labeled voxel maps aggregated from posed scans, and fixed-range crops.

pub mod scans;

use std::collections::{BTreeSet, HashMap};

use nalgebra::{Matrix3, Matrix4, Rotation3, Vector3};

use crate::error::{Error, Result};
use crate::scene::{ClassId, GridSpec, LabelHistogram, Point3, VoxelCoord, VoxelScene};

const ROTATION_TOLERANCE: f64 = 1e-6;

/// Rigid sensor-to-world transform `p_w = R p_s + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl RigidTransform {
    /// Rejects rotations that are not orthonormal with determinant +1.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if rotation.iter().chain(translation.iter()).any(|v| !v.is_finite()) {
            return Err(Error::RejectedInput("non-finite pose".into()));
        }
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        let det = rotation.determinant();
        if ortho > ROTATION_TOLERANCE || (det - 1.0).abs() > ROTATION_TOLERANCE {
            return Err(Error::RejectedInput(format!(
                "pose rotation is not proper orthonormal (|RᵀR - I| = {ortho:.2e}, det = {det})"
            )));
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn from_translation(t: Point3) -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::from(t) }
    }

    /// Rotation about +z by `yaw` radians followed by translation `t`.
    pub fn from_yaw(yaw: f64, t: Point3) -> Self {
        let rotation = *Rotation3::from_axis_angle(&Vector3::z_axis(), yaw).matrix();
        Self { rotation, translation: Vector3::from(t) }
    }

    /// Parses a row-major homogeneous 4x4 matrix.
    pub fn from_row_major(m: &[f64; 16]) -> Result<Self> {
        let h = Matrix4::from_row_slice(m);
        let bottom = [h[(3, 0)], h[(3, 1)], h[(3, 2)], h[(3, 3)]];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::RejectedInput(format!("pose bottom row {bottom:?} is not [0, 0, 0, 1]")));
        }
        Self::new(h.fixed_view::<3, 3>(0, 0).into_owned(), h.fixed_view::<3, 1>(0, 3).into_owned())
    }

    pub fn to_row_major(&self) -> [f64; 16] {
        let mut out = [0.0; 16];
        for r in 0..3 {
            for c in 0..3 {
                out[r * 4 + c] = self.rotation[(r, c)];
            }
            out[r * 4 + 3] = self.translation[r];
        }
        out[15] = 1.0;
        out
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn apply(&self, p: Point3) -> Point3 {
        (self.rotation * Vector3::from(p) + self.translation).into()
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self { rotation: rt, translation: -(rt * self.translation) }
    }
}

/// One labeled scan in its sensor frame, with its sensor-to-world pose.
#[derive(Debug, Clone, PartialEq)]
pub struct PosedScan {
    pub id: String,
    pub points: Vec<Point3>,
    pub labels: Vec<ClassId>,
    pub pose: RigidTransform,
}

impl PosedScan {
    pub fn new(id: impl Into<String>, points: Vec<Point3>, labels: Vec<ClassId>, pose: RigidTransform) -> Result<Self> {
        if points.len() != labels.len() {
            return Err(Error::RejectedInput(format!(
                "{} points but {} labels",
                points.len(),
                labels.len()
            )));
        }
        Ok(Self { id: id.into(), points, labels, pose })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Drops points whose label is in `moving`, keeping survivor order.
pub fn filter_moving(scan: &PosedScan, moving: &BTreeSet<ClassId>) -> PosedScan {
    let (points, labels) = scan
        .points
        .iter()
        .zip(&scan.labels)
        .filter(|(_, l)| !moving.contains(l))
        .map(|(p, l)| (*p, *l))
        .unzip();
    PosedScan { id: scan.id.clone(), points, labels, pose: scan.pose }
}

/// World-frame voxel map with the number of points that hit each voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneMap {
    scene: VoxelScene,
    counts: Vec<u32>,
}

impl SceneMap {
    pub fn scene(&self) -> &VoxelScene {
        &self.scene
    }

    /// Contributing-point counts aligned with `scene().coords()`.
    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn into_scene(self) -> VoxelScene {
        self.scene
    }
}

/// Per-voxel label histograms. Merging is commutative, so partial maps built
/// from disjoint scan subsets can be combined in any order.
#[derive(Debug, Clone)]
pub struct MapAccumulator {
    grid: GridSpec,
    num_classes: u8,
    cells: HashMap<VoxelCoord, LabelHistogram>,
}

impl MapAccumulator {
    pub fn new(grid: GridSpec, num_classes: u8) -> Self {
        Self { grid, num_classes, cells: HashMap::new() }
    }

    /// Adds the static points of `scan` in world frame.
    pub fn add_scan(&mut self, scan: &PosedScan, moving: &BTreeSet<ClassId>) -> Result<()> {
        for (p, &l) in scan.points.iter().zip(&scan.labels) {
            if moving.contains(&l) {
                continue;
            }
            if l == 0 || l > self.num_classes {
                return Err(Error::RejectedInput(format!(
                    "scan {}: label {l} outside 1..={}",
                    scan.id, self.num_classes
                )));
            }
            let w = scan.pose.apply(*p);
            if w.iter().any(|v| !v.is_finite()) {
                return Err(Error::RejectedInput(format!("scan {}: non-finite point {p:?}", scan.id)));
            }
            if let Some(c) = self.grid.voxel_index(w) {
                self.cells.entry(c).or_default().add(l, 1);
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: MapAccumulator) -> Result<()> {
        if other.grid != self.grid || other.num_classes != self.num_classes {
            return Err(Error::ShapeMismatch("merging maps over different grids".into()));
        }
        for (c, h) in other.cells {
            self.cells.entry(c).or_default().merge(&h);
        }
        Ok(())
    }

    pub fn finish(self) -> Result<SceneMap> {
        let mut cells: Vec<(VoxelCoord, ClassId, u32)> = self
            .cells
            .into_iter()
            .filter_map(|(c, h)| h.majority().map(|l| (c, l, h.total())))
            .collect();
        cells.sort_unstable_by_key(|x| x.0);
        let counts = cells.iter().map(|x| x.2).collect();
        let (coords, labels) = cells.into_iter().map(|x| (x.0, x.1)).unzip();
        let scene = VoxelScene::new(self.grid, self.num_classes, coords, labels)?;
        Ok(SceneMap { scene, counts })
    }
}

/// Aggregates posed scans into a world-frame map on `map_grid`, removing
/// moving classes first. Conflicting labels resolve by majority vote.
pub fn aggregate(
    scans: &[PosedScan],
    map_grid: &GridSpec,
    moving: &BTreeSet<ClassId>,
    num_classes: u8,
) -> Result<SceneMap> {
    if scans.is_empty() {
        return Err(Error::RejectedInput("no scans to aggregate".into()));
    }
    let mut acc = MapAccumulator::new(*map_grid, num_classes);
    for scan in scans {
        acc.add_scan(scan, moving)?;
    }
    acc.finish()
}

/// Bounding grid of all static world-frame points, snapped outward to
/// multiples of `resolution`.
pub fn auto_map_grid(scans: &[PosedScan], moving: &BTreeSet<ClassId>, resolution: f64) -> Result<GridSpec> {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for scan in scans {
        for (p, l) in scan.points.iter().zip(&scan.labels) {
            if moving.contains(l) {
                continue;
            }
            let w = scan.pose.apply(*p);
            if w.iter().any(|v| !v.is_finite()) {
                return Err(Error::RejectedInput(format!("scan {}: non-finite point {p:?}", scan.id)));
            }
            for a in 0..3 {
                lo[a] = lo[a].min(w[a]);
                hi[a] = hi[a].max(w[a]);
            }
        }
    }
    if lo[0] > hi[0] {
        return Err(Error::RejectedInput("no static points to bound".into()));
    }
    let mut min = [0.0; 3];
    let mut dims = [0usize; 3];
    for a in 0..3 {
        let first = (lo[a] / resolution).floor();
        let last = (hi[a] / resolution).floor();
        min[a] = first * resolution;
        dims[a] = (last - first) as usize + 1;
    }
    GridSpec::from_dims(min, dims, resolution)
}

/// Re-expresses map voxels in the frame of `pose` and re-voxelizes their
/// centers into `crop_grid`, voting labels by contributing-point counts.
pub fn crop_at_pose(map: &SceneMap, pose: &RigidTransform, crop_grid: &GridSpec) -> Result<VoxelScene> {
    let to_local = pose.inverse();
    let grid = map.scene.grid();
    let mut cells: HashMap<VoxelCoord, LabelHistogram> = HashMap::new();
    for ((c, l), &n) in map.scene.iter().zip(&map.counts) {
        let p = to_local.apply(grid.voxel_center(c));
        if let Some(dst) = crop_grid.voxel_index(p) {
            cells.entry(dst).or_default().add(l, n);
        }
    }
    crate::scene::scene_from_histograms(*crop_grid, map.scene.num_classes(), cells)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::{MOVING_CLASSES, PERSON, ROAD, SIDEWALK};

    fn moving() -> BTreeSet<ClassId> {
        MOVING_CLASSES.into_iter().collect()
    }

    #[test]
    fn filter_counts() {
        let scan = PosedScan::new(
            "0",
            vec![[0.0; 3], [1.0; 3], [2.0; 3], [3.0; 3], [4.0; 3]],
            vec![ROAD, PERSON, ROAD, PERSON, SIDEWALK],
            RigidTransform::identity(),
        )
        .unwrap();
        let out = filter_moving(&scan, &moving());
        assert_eq!(out.labels, vec![ROAD, ROAD, SIDEWALK]);
        assert_eq!(out.points, vec![[0.0; 3], [2.0; 3], [4.0; 3]]);
        assert_eq!(filter_moving(&scan, &BTreeSet::new()), scan);
    }

    #[test]
    fn rejects_improper_rotation() {
        let reflect = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(RigidTransform::new(reflect, Vector3::zeros()).is_err());
        let scaled = Matrix3::identity() * 1.01;
        assert!(RigidTransform::new(scaled, Vector3::zeros()).is_err());
    }

    #[test]
    fn row_major_roundtrip() {
        let t = RigidTransform::from_yaw(0.3, [1.0, -2.0, 0.5]);
        let back = RigidTransform::from_row_major(&t.to_row_major()).unwrap();
        assert!((back.rotation - t.rotation).abs().max() < 1e-15);
        let p = [0.2, 0.4, -1.0];
        let q = t.inverse().apply(t.apply(p));
        assert!((0..3).all(|a| (q[a] - p[a]).abs() < 1e-12));
    }

    #[test]
    fn conflicting_labels_majority() {
        let grid = GridSpec::from_dims([0.0; 3], [4, 4, 4], 1.0).unwrap();
        let mk = |id: &str, l| PosedScan::new(id, vec![[1.5, 1.5, 1.5]], vec![l], RigidTransform::identity()).unwrap();
        let scans = [mk("a", ROAD), mk("b", SIDEWALK), mk("c", ROAD)];
        let map = aggregate(&scans, &grid, &moving(), 19).unwrap();
        assert_eq!(map.scene().labels(), &[ROAD]);
        assert_eq!(map.counts(), &[3]);
    }

    #[test]
    fn yaw_crop_rotates_index() {
        let grid = GridSpec::from_dims([-2.0, -2.0, 0.0], [4, 4, 1], 1.0).unwrap();
        let scene = VoxelScene::new(grid, 2, vec![[3, 2, 0]], vec![1]).unwrap();
        let map = SceneMap { scene, counts: vec![1] };
        // center (1.5, 0.5); in a frame yawed +90°, it lies at (0.5, -1.5)
        let crop = crop_at_pose(&map, &RigidTransform::from_yaw(std::f64::consts::FRAC_PI_2, [0.0; 3]), &grid).unwrap();
        assert_eq!(crop.coords(), &[[2, 0, 0]]);
    }

    #[test]
    fn far_crop_is_empty() {
        let grid = GridSpec::from_dims([0.0; 3], [4, 4, 4], 1.0).unwrap();
        let scene = VoxelScene::new(grid, 2, vec![[1, 1, 1]], vec![2]).unwrap();
        let map = SceneMap { scene, counts: vec![5] };
        let crop = crop_at_pose(&map, &RigidTransform::from_translation([100.0, 100.0, 0.0]), &grid).unwrap();
        assert!(crop.is_empty());
    }

    #[test]
    fn auto_grid_covers_points() {
        let scan = PosedScan::new(
            "0",
            vec![[-0.35, 0.0, 1.0], [2.04, 0.99, 1.0]],
            vec![ROAD, ROAD],
            RigidTransform::from_translation([0.0, 0.0, -1.0]),
        )
        .unwrap();
        let g = auto_map_grid(&[scan.clone()], &moving(), 0.1).unwrap();
        for p in &scan.points {
            assert!(g.voxel_index(scan.pose.apply(*p)).is_some());
        }
    }
}
