use super::VoxelCoord;
use crate::error::{Error, Result};

/// Dense binary grid in `(i, j, k)` row-major order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OccupancyGrid {
    dims: [usize; 3],
    cells: Vec<bool>,
}

impl OccupancyGrid {
    pub fn new(dims: [usize; 3]) -> Self {
        Self { dims, cells: vec![false; dims.iter().product()] }
    }

    pub fn from_coords(dims: [usize; 3], coords: &[VoxelCoord]) -> Self {
        let mut g = Self::new(dims);
        for &c in coords {
            g.set(c, true);
        }
        g
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn get(&self, c: VoxelCoord) -> bool {
        self.cells[linear_index(self.dims, c)]
    }

    pub fn set(&mut self, c: VoxelCoord, value: bool) {
        let idx = linear_index(self.dims, c);
        self.cells[idx] = value;
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&b| b).count()
    }

    /// Occupied cells in lexicographic order.
    pub fn occupied(&self) -> Vec<VoxelCoord> {
        self.cells
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| coord_of(self.dims, i))
            .collect()
    }
}

#[inline]
pub(crate) fn linear_index(dims: [usize; 3], c: VoxelCoord) -> usize {
    (c[0] as usize * dims[1] + c[1] as usize) * dims[2] + c[2] as usize
}

#[inline]
pub(crate) fn coord_of(dims: [usize; 3], idx: usize) -> VoxelCoord {
    let k = idx % dims[2];
    let j = (idx / dims[2]) % dims[1];
    let i = idx / (dims[2] * dims[1]);
    [i as u16, j as u16, k as u16]
}

/// Sparse latent: `d_z` features at each latent-grid coordinate.
///
/// Construction checks bounds and feature lengths; duplicate coordinates are
/// rejected when packing.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseLatent {
    dims: [usize; 3],
    latent_dim: usize,
    coords: Vec<VoxelCoord>,
    features: Vec<f32>,
}

impl SparseLatent {
    pub fn new(dims: [usize; 3], latent_dim: usize, coords: Vec<VoxelCoord>, features: Vec<f32>) -> Result<Self> {
        if latent_dim == 0 {
            return Err(Error::ShapeMismatch("latent dimension must be positive".into()));
        }
        if features.len() != coords.len() * latent_dim {
            return Err(Error::ShapeMismatch(format!(
                "{} features for {} coords of dim {latent_dim}",
                features.len(),
                coords.len()
            )));
        }
        if let Some(c) = coords.iter().find(|c| (0..3).any(|a| c[a] as usize >= dims[a])) {
            return Err(Error::ShapeMismatch(format!("latent coord {c:?} outside {dims:?}")));
        }
        Ok(Self { dims, latent_dim, coords, features })
    }

    pub fn empty(dims: [usize; 3], latent_dim: usize) -> Self {
        Self { dims, latent_dim, coords: Vec::new(), features: Vec::new() }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn coords(&self) -> &[VoxelCoord] {
        &self.coords
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn feature(&self, i: usize) -> &[f32] {
        &self.features[i * self.latent_dim..(i + 1) * self.latent_dim]
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// Dense `H x W x D x d_z` latent, row-major with features innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLatent {
    dims: [usize; 3],
    latent_dim: usize,
    values: Vec<f32>,
}

impl DenseLatent {
    pub fn zeros(dims: [usize; 3], latent_dim: usize) -> Self {
        Self { dims, latent_dim, values: vec![0.0; dims.iter().product::<usize>() * latent_dim] }
    }

    pub fn from_values(dims: [usize; 3], latent_dim: usize, values: Vec<f32>) -> Result<Self> {
        let expected = dims.iter().product::<usize>() * latent_dim;
        if values.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "{} values for dense latent {dims:?} x {latent_dim}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::RejectedInput("dense latent holds non-finite values".into()));
        }
        Ok(Self { dims, latent_dim, values })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn num_cells(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn cell(&self, c: VoxelCoord) -> &[f32] {
        let i = linear_index(self.dims, c) * self.latent_dim;
        &self.values[i..i + self.latent_dim]
    }
}

/// Scatters a sparse latent into a zero-initialized dense grid.
pub fn pack_dense(latent: &SparseLatent) -> Result<DenseLatent> {
    let mut dense = DenseLatent::zeros(latent.dims, latent.latent_dim);
    let mut seen = OccupancyGrid::new(latent.dims);
    for (i, &c) in latent.coords.iter().enumerate() {
        if seen.get(c) {
            return Err(Error::ShapeMismatch(format!("duplicate latent coord {c:?}")));
        }
        seen.set(c, true);
        let at = linear_index(latent.dims, c) * latent.latent_dim;
        dense.values[at..at + latent.latent_dim].copy_from_slice(latent.feature(i));
    }
    if dense.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::RejectedInput("sparse latent holds non-finite values".into()));
    }
    Ok(dense)
}

/// Gathers dense features at occupied cells, in lexicographic order.
pub fn unpack_sparse(dense: &DenseLatent, occupancy: &OccupancyGrid) -> Result<SparseLatent> {
    if occupancy.dims() != dense.dims {
        return Err(Error::ShapeMismatch(format!(
            "occupancy {:?} vs dense latent {:?}",
            occupancy.dims(),
            dense.dims
        )));
    }
    let coords = occupancy.occupied();
    let mut features = Vec::with_capacity(coords.len() * dense.latent_dim);
    for &c in &coords {
        features.extend_from_slice(dense.cell(c));
    }
    SparseLatent::new(dense.dims, dense.latent_dim, coords, features)
}
