//! Semantic voxel scenes.
//!
//! A [`VoxelScene`] is a sparse set of occupied voxels inside a fixed metric
//! [`GridSpec`], each carrying one semantic class id in `1..=C`. Everything
//! else in the crate (map building, the autoencoder, LiDAR simulation,
//! evaluation) consumes or produces this type.

pub(crate) mod hierarchy;
pub mod io;
pub(crate) mod latent;

pub use hierarchy::{downsample_scene, HierarchyTargets, LevelTarget};
pub use latent::{pack_dense, unpack_sparse, DenseLatent, OccupancyGrid, SparseLatent};

use std::collections::HashMap;

use crate::error::{Error, Result};

/// Integer voxel index `(i, j, k)`. Grids up to 65535 cells per axis.
pub type VoxelCoord = [u16; 3];

/// Semantic class id, valid range `1..=C`.
pub type ClassId = u8;

/// Metric point in meters.
pub type Point3 = [f64; 3];

const GRID_TOLERANCE_M: f64 = 1e-9;

/// Axis-aligned metric voxel grid with half-open cells.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    min_corner: Point3,
    max_corner: Point3,
    resolution: f64,
    dims: [usize; 3],
}

impl GridSpec {
    pub fn new(min_corner: Point3, max_corner: Point3, resolution: f64) -> Result<Self> {
        if !(resolution.is_finite() && resolution > 0.0) {
            return Err(Error::InvalidGrid(format!("resolution {resolution} must be positive")));
        }
        let mut dims = [0usize; 3];
        for axis in 0..3 {
            let (lo, hi) = (min_corner[axis], max_corner[axis]);
            if !(lo.is_finite() && hi.is_finite()) || hi <= lo {
                return Err(Error::InvalidGrid(format!(
                    "axis {axis}: extent [{lo}, {hi}] is empty or non-finite"
                )));
            }
            let cells = (hi - lo) / resolution;
            let rounded = cells.round();
            if ((cells - rounded) * resolution).abs() > GRID_TOLERANCE_M || rounded < 1.0 {
                return Err(Error::InvalidGrid(format!(
                    "axis {axis}: extent {} m is not a positive multiple of {resolution} m",
                    hi - lo
                )));
            }
            if rounded > u16::MAX as f64 {
                return Err(Error::InvalidGrid(format!("axis {axis}: {rounded} cells exceed 16-bit indices")));
            }
            dims[axis] = rounded as usize;
        }
        Ok(Self { min_corner, max_corner, resolution, dims })
    }

    /// Grid of `dims` cells of size `resolution` starting at `min_corner`.
    pub fn from_dims(min_corner: Point3, dims: [usize; 3], resolution: f64) -> Result<Self> {
        let max_corner = [
            min_corner[0] + dims[0] as f64 * resolution,
            min_corner[1] + dims[1] as f64 * resolution,
            min_corner[2] + dims[2] as f64 * resolution,
        ];
        Self::new(min_corner, max_corner, resolution)
    }

    /// The fixed training range: x, y in [-25.6, 25.6) m, z in [-2.2, 4.2) m at 0.1 m.
    pub fn training_crop() -> Self {
        Self::new([-25.6, -25.6, -2.2], [25.6, 25.6, 4.2], 0.1).expect("static grid is valid")
    }

    pub fn min_corner(&self) -> Point3 {
        self.min_corner
    }

    pub fn max_corner(&self) -> Point3 {
        self.max_corner
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn num_cells(&self) -> usize {
        self.dims.iter().product()
    }

    /// Index of the cell containing `p`, or `None` when `p` is outside the
    /// half-open extent. Non-finite points yield `None`.
    pub fn voxel_index(&self, p: Point3) -> Option<VoxelCoord> {
        let mut idx = [0u16; 3];
        for axis in 0..3 {
            let rel = (p[axis] - self.min_corner[axis]) / self.resolution;
            if !rel.is_finite() || rel < 0.0 {
                return None;
            }
            let cell = rel.floor();
            if cell >= self.dims[axis] as f64 {
                return None;
            }
            idx[axis] = cell as u16;
        }
        Some(idx)
    }

    pub fn voxel_center(&self, c: VoxelCoord) -> Point3 {
        [
            self.min_corner[0] + (c[0] as f64 + 0.5) * self.resolution,
            self.min_corner[1] + (c[1] as f64 + 0.5) * self.resolution,
            self.min_corner[2] + (c[2] as f64 + 0.5) * self.resolution,
        ]
    }

    pub fn contains_index(&self, c: VoxelCoord) -> bool {
        (0..3).all(|a| (c[a] as usize) < self.dims[a])
    }

    pub fn contains_point(&self, p: Point3) -> bool {
        (0..3).all(|a| p[a] >= self.min_corner[a] && p[a] < self.max_corner[a])
    }

    /// Cell counts after `levels` successive ceil-halvings.
    pub fn downsampled_dims(&self, levels: usize) -> [usize; 3] {
        downsampled_dims(self.dims, levels)
    }
}

pub(crate) fn downsampled_dims(mut dims: [usize; 3], levels: usize) -> [usize; 3] {
    for _ in 0..levels {
        for d in dims.iter_mut() {
            *d = d.div_ceil(2);
        }
    }
    dims
}

/// Sparse labeled voxel scene. Coordinates are unique and kept in
/// lexicographic `(i, j, k)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelScene {
    grid: GridSpec,
    num_classes: u8,
    coords: Vec<VoxelCoord>,
    labels: Vec<ClassId>,
}

impl VoxelScene {
    /// Validates every scene invariant and sorts into canonical order.
    pub fn new(grid: GridSpec, num_classes: u8, coords: Vec<VoxelCoord>, labels: Vec<ClassId>) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::InvalidScene("class count must be at least 1".into()));
        }
        if coords.len() != labels.len() {
            return Err(Error::InvalidScene(format!(
                "{} coords but {} labels",
                coords.len(),
                labels.len()
            )));
        }
        if let Some(c) = coords.iter().find(|c| !grid.contains_index(**c)) {
            return Err(Error::InvalidScene(format!("voxel {c:?} outside dims {:?}", grid.dims())));
        }
        if let Some(l) = labels.iter().find(|l| **l == 0 || **l > num_classes) {
            return Err(Error::InvalidScene(format!("label {l} outside 1..={num_classes}")));
        }
        let mut pairs: Vec<(VoxelCoord, ClassId)> = coords.into_iter().zip(labels).collect();
        pairs.sort_unstable_by_key(|p| p.0);
        if let Some(w) = pairs.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::InvalidScene(format!("duplicate voxel {:?}", w[0].0)));
        }
        let (coords, labels) = pairs.into_iter().unzip();
        Ok(Self { grid, num_classes, coords, labels })
    }

    pub fn empty(grid: GridSpec, num_classes: u8) -> Self {
        Self { grid, num_classes, coords: Vec::new(), labels: Vec::new() }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn num_classes(&self) -> u8 {
        self.num_classes
    }

    pub fn coords(&self) -> &[VoxelCoord] {
        &self.coords
    }

    pub fn labels(&self) -> &[ClassId] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (VoxelCoord, ClassId)> + '_ {
        self.coords.iter().copied().zip(self.labels.iter().copied())
    }

    /// Label at `c`, if occupied.
    pub fn label_at(&self, c: VoxelCoord) -> Option<ClassId> {
        self.coords.binary_search(&c).ok().map(|i| self.labels[i])
    }

    pub fn occupancy(&self) -> OccupancyGrid {
        OccupancyGrid::from_coords(self.grid.dims(), &self.coords)
    }

    /// Intersection-over-union of the occupied voxel sets of two scenes.
    /// Two empty scenes have IoU 1.
    pub fn voxel_iou(&self, other: &VoxelScene) -> f64 {
        let inter = self.intersection_count(other);
        let union = self.len() + other.len() - inter;
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Fraction of voxels occupied in both scenes whose labels agree.
    /// `None` when the scenes do not overlap.
    pub fn label_accuracy(&self, other: &VoxelScene) -> Option<f64> {
        let (mut both, mut agree) = (0usize, 0usize);
        for (c, l) in self.iter() {
            if let Some(o) = other.label_at(c) {
                both += 1;
                agree += usize::from(o == l);
            }
        }
        (both > 0).then(|| agree as f64 / both as f64)
    }

    fn intersection_count(&self, other: &VoxelScene) -> usize {
        let (mut a, mut b, mut n) = (0, 0, 0);
        while a < self.coords.len() && b < other.coords.len() {
            match self.coords[a].cmp(&other.coords[b]) {
                std::cmp::Ordering::Less => a += 1,
                std::cmp::Ordering::Greater => b += 1,
                std::cmp::Ordering::Equal => {
                    n += 1;
                    a += 1;
                    b += 1;
                }
            }
        }
        n
    }
}

/// Per-voxel class histogram finalized by majority vote, ties to the
/// smallest class id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LabelHistogram {
    counts: Vec<u32>,
}

impl LabelHistogram {
    pub fn add(&mut self, label: ClassId, weight: u32) {
        let idx = label as usize;
        if self.counts.len() <= idx {
            self.counts.resize(idx + 1, 0);
        }
        self.counts[idx] += weight;
    }

    pub fn merge(&mut self, other: &LabelHistogram) {
        if self.counts.len() < other.counts.len() {
            self.counts.resize(other.counts.len(), 0);
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += *b;
        }
    }

    pub fn total(&self) -> u32 {
        self.counts.iter().sum()
    }

    pub fn majority(&self) -> Option<ClassId> {
        let mut best: Option<(ClassId, u32)> = None;
        for (label, &count) in self.counts.iter().enumerate() {
            if count > 0 && best.is_none_or(|(_, c)| count > c) {
                best = Some((label as ClassId, count));
            }
        }
        best.map(|(l, _)| l)
    }
}

/// Voxelizes labeled metric points into `grid`.
///
/// Points outside the half-open grid extent are dropped; each voxel takes the
/// majority label of its points. A non-finite coordinate rejects the input.
pub fn voxelize(points: &[Point3], point_labels: &[ClassId], grid: &GridSpec, num_classes: u8) -> Result<VoxelScene> {
    if points.len() != point_labels.len() {
        return Err(Error::RejectedInput(format!(
            "{} points but {} labels",
            points.len(),
            point_labels.len()
        )));
    }
    if let Some(p) = points.iter().find(|p| p.iter().any(|v| !v.is_finite())) {
        return Err(Error::RejectedInput(format!("non-finite point {p:?}")));
    }
    if let Some(l) = point_labels.iter().find(|l| **l == 0 || **l > num_classes) {
        return Err(Error::RejectedInput(format!("label {l} outside 1..={num_classes}")));
    }
    let mut cells: HashMap<VoxelCoord, LabelHistogram> = HashMap::new();
    for (p, &l) in points.iter().zip(point_labels) {
        if let Some(c) = grid.voxel_index(*p) {
            cells.entry(c).or_default().add(l, 1);
        }
    }
    scene_from_histograms(*grid, num_classes, cells)
}

pub(crate) fn scene_from_histograms(
    grid: GridSpec,
    num_classes: u8,
    cells: HashMap<VoxelCoord, LabelHistogram>,
) -> Result<VoxelScene> {
    let (coords, labels) = cells
        .into_iter()
        .filter_map(|(c, h)| h.majority().map(|l| (c, l)))
        .unzip();
    VoxelScene::new(grid, num_classes, coords, labels)
}
