//! Sparse 3-D convolutions expressed as row gathers followed by a matmul.
//!
//! A [`CoordSet`] is a sorted list of active cells. Neighbor tables map every
//! output row and kernel tap to an input row, or to the sentinel row `N`
//! which reads a zero vector. Dense grids are simply full coordinate sets.

use candle_core::{DType, Tensor};
use rustc_hash::FxHashMap;

use super::{u32_tensor, Init, ParamStore};
use crate::error::Result;
use crate::scene::VoxelCoord;

/// Sorted, unique active cells of a grid with O(1) lookup.
#[derive(Debug, Clone)]
pub struct CoordSet {
    dims: [usize; 3],
    coords: Vec<VoxelCoord>,
    lookup: FxHashMap<u64, u32>,
}

#[inline]
fn key(dims: [usize; 3], c: VoxelCoord) -> u64 {
    ((c[0] as u64 * dims[1] as u64) + c[1] as u64) * dims[2] as u64 + c[2] as u64
}

/// Child offset `(dx, dy, dz)` in `{0,1}^3` as `4dx + 2dy + dz`.
#[inline]
pub fn child_offset(c: VoxelCoord) -> usize {
    ((c[0] & 1) as usize) << 2 | ((c[1] & 1) as usize) << 1 | (c[2] & 1) as usize
}

impl CoordSet {
    /// `coords` must be sorted and unique.
    pub fn new(dims: [usize; 3], coords: Vec<VoxelCoord>) -> Self {
        debug_assert!(coords.windows(2).all(|w| w[0] < w[1]));
        let mut lookup = FxHashMap::default();
        lookup.reserve(coords.len());
        for (i, &c) in coords.iter().enumerate() {
            lookup.insert(key(dims, c), i as u32);
        }
        Self { dims, coords, lookup }
    }

    /// Every cell of the grid.
    pub fn dense(dims: [usize; 3]) -> Self {
        let mut coords = Vec::with_capacity(dims.iter().product());
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                for k in 0..dims[2] {
                    coords.push([i as u16, j as u16, k as u16]);
                }
            }
        }
        Self::new(dims, coords)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn coords(&self) -> &[VoxelCoord] {
        &self.coords
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn find(&self, c: VoxelCoord) -> Option<u32> {
        self.lookup.get(&key(self.dims, c)).copied()
    }

    /// Subset of rows, in the given (ascending) order.
    pub fn select(&self, rows: &[u32]) -> CoordSet {
        CoordSet::new(self.dims, rows.iter().map(|&r| self.coords[r as usize]).collect())
    }

    /// Unique parent cells on the ceil-halved grid.
    pub fn parents(&self) -> CoordSet {
        let dims = self.dims.map(|d| d.div_ceil(2));
        let mut p: Vec<VoxelCoord> = self.coords.iter().map(|c| [c[0] >> 1, c[1] >> 1, c[2] >> 1]).collect();
        p.sort_unstable();
        p.dedup();
        CoordSet::new(dims, p)
    }

    /// All in-bounds children on `child_dims`, sorted, with each child's
    /// source row `parent_row * 8 + offset` for [`Up2`].
    pub fn children(&self, child_dims: [usize; 3]) -> (CoordSet, Vec<u32>) {
        let mut out: Vec<(VoxelCoord, u32)> = Vec::with_capacity(self.len() * 8);
        for (p, c) in self.coords.iter().enumerate() {
            for off in 0..8u16 {
                let child = [c[0] * 2 + (off >> 2), c[1] * 2 + ((off >> 1) & 1), c[2] * 2 + (off & 1)];
                if (0..3).all(|a| (child[a] as usize) < child_dims[a]) {
                    out.push((child, p as u32 * 8 + off as u32));
                }
            }
        }
        out.sort_unstable_by_key(|x| x.0);
        let rows = out.iter().map(|x| x.1).collect();
        (CoordSet::new(child_dims, out.into_iter().map(|x| x.0).collect()), rows)
    }

    /// 3x3x3 same-coordinate neighbor table (`len * 27` entries, sentinel `len`).
    pub fn subm3_table(&self) -> Vec<u32> {
        let n = self.len() as u32;
        let mut t = Vec::with_capacity(self.len() * 27);
        for c in &self.coords {
            for di in -1i32..=1 {
                for dj in -1i32..=1 {
                    for dk in -1i32..=1 {
                        let q = [c[0] as i32 + di, c[1] as i32 + dj, c[2] as i32 + dk];
                        let inside = (0..3).all(|a| q[a] >= 0 && (q[a] as usize) < self.dims[a]);
                        let row = if inside { self.find(q.map(|v| v as u16)) } else { None };
                        t.push(row.unwrap_or(n));
                    }
                }
            }
        }
        t
    }

    /// Stride-2 table from this (fine) set into `coarse` (`coarse.len() * 8`
    /// entries, sentinel `self.len()`).
    pub fn down2_table(&self, coarse: &CoordSet) -> Vec<u32> {
        let n = self.len() as u32;
        let mut t = Vec::with_capacity(coarse.len() * 8);
        for p in &coarse.coords {
            for off in 0..8u16 {
                let child = [p[0] * 2 + (off >> 2), p[1] * 2 + ((off >> 1) & 1), p[2] * 2 + (off & 1)];
                let inside = (0..3).all(|a| (child[a] as usize) < self.dims[a]);
                t.push(if inside { self.find(child).unwrap_or(n) } else { n });
            }
        }
        t
    }

    /// Row of each fine cell's parent in `coarse`.
    pub fn parent_rows(&self, coarse: &CoordSet) -> Vec<u32> {
        self.coords
            .iter()
            .map(|c| coarse.find([c[0] >> 1, c[1] >> 1, c[2] >> 1]).expect("parent present"))
            .collect()
    }
}

/// Offsets a per-sample table for `batch` stacked copies of an `n_in`-row
/// input; the sentinel becomes `batch * n_in`.
pub fn batch_table(table: &[u32], n_in: usize, batch: usize) -> Vec<u32> {
    let sentinel = (batch * n_in) as u32;
    let mut out = Vec::with_capacity(table.len() * batch);
    for b in 0..batch {
        let base = (b * n_in) as u32;
        out.extend(table.iter().map(|&r| if r as usize == n_in { sentinel } else { base + r }));
    }
    out
}

/// Gather table prepared as a tensor.
#[derive(Debug, Clone)]
pub struct Table {
    idx: Tensor,
    n_out: usize,
}

impl Table {
    pub fn new(idx: &[u32], taps: usize) -> Result<Self> {
        Ok(Self { idx: u32_tensor(idx)?, n_out: idx.len() / taps })
    }

    pub fn n_out(&self) -> usize {
        self.n_out
    }
}

/// Convolution over a neighbor table: 27 taps for submanifold 3x3x3, 8 for
/// stride-2 downsampling.
#[derive(Debug, Clone)]
pub struct SparseConv {
    w: Tensor,
    b: Tensor,
    taps: usize,
    cin: usize,
}

impl SparseConv {
    pub fn new(store: &mut ParamStore, name: &str, taps: usize, cin: usize, cout: usize) -> Result<Self> {
        let w = store.get_or_init(&format!("{name}.weight"), &[taps * cin, cout], Init::fan_in(taps * cin))?;
        let b = store.get_or_init(&format!("{name}.bias"), &[cout], Init::Const(0.0))?;
        Ok(Self { w, b, taps, cin })
    }

    pub fn subm3(store: &mut ParamStore, name: &str, cin: usize, cout: usize) -> Result<Self> {
        Self::new(store, name, 27, cin, cout)
    }

    pub fn down2(store: &mut ParamStore, name: &str, cin: usize, cout: usize) -> Result<Self> {
        Self::new(store, name, 8, cin, cout)
    }

    /// `x` is `(n_in, cin)`; returns `(table.n_out, cout)`.
    pub fn forward(&self, x: &Tensor, table: &Table) -> Result<Tensor> {
        let pad = Tensor::zeros((1, self.cin), x.dtype(), x.device())?;
        let xp = Tensor::cat(&[x, &pad], 0)?;
        let g = xp.index_select(&table.idx, 0)?.reshape((table.n_out, self.taps * self.cin))?;
        Ok(g.matmul(&self.w)?.broadcast_add(&self.b)?)
    }
}

/// Generative transposed stride-2 convolution: each parent emits one
/// feature per child offset; only the requested children are kept.
#[derive(Debug, Clone)]
pub struct Up2 {
    w: Tensor,
    b: Tensor,
    cout: usize,
}

impl Up2 {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize) -> Result<Self> {
        let w = store.get_or_init(&format!("{name}.weight"), &[cin, 8 * cout], Init::fan_in(cin))?;
        let b = store.get_or_init(&format!("{name}.bias"), &[cout], Init::Const(0.0))?;
        Ok(Self { w, b, cout })
    }

    /// `rows[i] = parent_row * 8 + offset` of output child `i`.
    pub fn forward(&self, x: &Tensor, rows: &Tensor) -> Result<Tensor> {
        let n = x.dim(0)?;
        let y = x.matmul(&self.w)?.reshape((n * 8, self.cout))?;
        Ok(y.index_select(rows, 0)?.broadcast_add(&self.b)?)
    }
}

/// Scatters `(rows.len(), c)` features into a zero-filled `(n, c)` tensor;
/// `slot[i]` is the source row for output `i` or `rows.len()` for zero.
pub fn scatter_rows(x: &Tensor, slot: &Tensor) -> Result<Tensor> {
    let c = x.dim(1)?;
    let pad = Tensor::zeros((1, c), x.dtype(), x.device())?;
    Ok(Tensor::cat(&[x, &pad], 0)?.index_select(slot, 0)?)
}

/// Converts a 0/1 mask to a tensor of the given dtype.
pub fn mask_tensor(mask: &[bool], dtype: DType) -> Result<Tensor> {
    let v: Vec<f32> = mask.iter().map(|&b| b as u8 as f32).collect();
    Ok(Tensor::from_vec(v, mask.len(), &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn dense_subm3_matches_naive() {
        // 1 channel, all weights 1, no bias: output = number of in-bounds
        // neighbors weighted by input.
        let dims = [3, 3, 2];
        let set = CoordSet::dense(dims);
        let mut store = ParamStore::new(0, DType::F64);
        let conv = SparseConv::subm3(&mut store, "c", 1, 1).unwrap();
        store.get("c.weight").unwrap().set(&Tensor::ones((27, 1), DType::F64, &Device::Cpu).unwrap()).unwrap();
        let x = Tensor::ones((set.len(), 1), DType::F64, &Device::Cpu).unwrap();
        let table = Table::new(&set.subm3_table(), 27).unwrap();
        let y = conv.forward(&x, &table).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        // corner cell (0,0,0): 2*2*2 neighbors; center-ish (1,1,0): 3*3*2
        assert_eq!(y[0], 8.0);
        assert_eq!(y[set.find([1, 1, 0]).unwrap() as usize], 18.0);
    }

    #[test]
    fn children_and_parents_are_consistent() {
        let set = CoordSet::new([3, 3, 1], vec![[0, 1, 0], [1, 1, 0]]);
        let (children, rows) = set.children([5, 5, 1]);
        assert!(children.coords().windows(2).all(|w| w[0] < w[1]));
        // z = 1 children fall outside the single-layer grid
        assert_eq!(children.len(), 8);
        for (c, r) in children.coords().iter().zip(&rows) {
            let p = set.coords()[(*r / 8) as usize];
            assert_eq!([c[0] >> 1, c[1] >> 1, c[2] >> 1], p);
            assert_eq!(child_offset(*c), (*r % 8) as usize);
        }
        assert_eq!(children.parents().coords(), set.coords());
    }

    #[test]
    fn batch_table_offsets() {
        assert_eq!(batch_table(&[0, 2, 1], 2, 2), vec![0, 4, 1, 2, 4, 3]);
    }
}
