//! Convolutional U-shaped denoiser over the dense latent grid and the sparse
//! LiDAR condition encoder.

use candle_core::{DType, Tensor};

use super::{ConditionToken, DiffusionConfig};
use crate::error::{Error, Result};
use crate::lidar::LidarCloud;
use crate::nn::sparse::{scatter_rows, Table};
use crate::nn::{u32_tensor, CoordSet, Linear, ParamStore, SparseConv, Up2};
use crate::scene::latent::coord_of;
use crate::scene::{GridSpec, VoxelCoord};

/// Sinusoidal embedding of step `t`, shape `(1, dim)`.
pub(crate) fn time_embedding(t: usize, dim: usize, dtype: DType) -> Result<Tensor> {
    let half = dim / 2;
    let mut v = Vec::with_capacity(dim);
    let freqs: Vec<f64> = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp()).collect();
    v.extend(freqs.iter().map(|f| (t as f64 * f).sin()));
    v.extend(freqs.iter().map(|f| (t as f64 * f).cos()));
    Ok(Tensor::from_vec(v, (1, dim), &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}

struct ResBlock {
    conv1: SparseConv,
    conv2: SparseConv,
    time: Linear,
    cond: Option<Linear>,
}

impl ResBlock {
    fn new(store: &mut ParamStore, name: &str, c: usize, time_dim: usize, token: Option<usize>) -> Result<Self> {
        Ok(Self {
            conv1: SparseConv::subm3(store, &format!("{name}.conv1"), c, c)?,
            conv2: SparseConv::subm3(store, &format!("{name}.conv2"), c, c)?,
            time: Linear::with_bias_init(store, &format!("{name}.time"), time_dim, c, 1.0)?,
            cond: token.map(|tc| Linear::no_bias(store, &format!("{name}.cond"), tc, c)).transpose()?,
        })
    }

    /// `h + conv2(silu(conv1(silu(h)) * time(t) * (1 + cond(token))))`; a
    /// missing token leaves the features unmodulated.
    fn forward(&self, h: &Tensor, table: &Table, temb: &Tensor, token: Option<&Tensor>) -> Result<Tensor> {
        let a = self.conv1.forward(&h.silu()?, table)?;
        let mut a = a.broadcast_mul(&self.time.forward(temb)?)?;
        if let (Some(tok), Some(proj)) = (token, &self.cond) {
            a = (a * (proj.forward(tok)? + 1.0)?)?;
        }
        let a = self.conv2.forward(&a.silu()?, table)?;
        Ok((h + a)?)
    }
}

/// Mean of the 8 children rows per coarse cell (absent children count as 0).
fn pool8(x: &Tensor, idx: &Tensor) -> Result<Tensor> {
    let c = x.dim(1)?;
    let pad = Tensor::zeros((1, c), x.dtype(), x.device())?;
    let n = idx.dim(0)? / 8;
    Ok((Tensor::cat(&[x, &pad], 0)?.index_select(idx, 0)?.reshape((n, 8, c))?.sum(1)? / 8.0)?)
}

/// U-shaped denoiser of residual submanifold blocks on full (dense) grids.
/// Inputs are the noisy latent plus normalized cell coordinates.
pub struct DenseUnet {
    latent_dim: usize,
    time_dim: usize,
    coords: Tensor,
    subm: Vec<Table>,
    down: Vec<Table>,
    pool: Vec<Tensor>,
    up_rows: Vec<Tensor>,
    input: SparseConv,
    enc: Vec<ResBlock>,
    downs: Vec<SparseConv>,
    ups: Vec<Up2>,
    merge: Vec<SparseConv>,
    dec: Vec<ResBlock>,
    out: Linear,
}

impl DenseUnet {
    pub fn new(store: &mut ParamStore, cfg: &DiffusionConfig, dims: [usize; 3], latent_dim: usize) -> Result<Self> {
        let levels = cfg.widths.len();
        let mut grids = vec![dims];
        for _ in 1..levels {
            let d = grids.last().expect("non-empty");
            grids.push(d.map(|x| x.div_ceil(2)));
        }
        let sets: Vec<CoordSet> = grids.iter().map(|&d| CoordSet::dense(d)).collect();
        let mut subm = Vec::with_capacity(levels);
        let mut down = Vec::new();
        let mut pool = Vec::new();
        let mut up_rows = Vec::new();
        for l in 0..levels {
            subm.push(Table::new(&sets[l].subm3_table(), 27)?);
            if l + 1 < levels {
                let t = sets[l].down2_table(&sets[l + 1]);
                down.push(Table::new(&t, 8)?);
                pool.push(u32_tensor(&t)?);
                let (children, rows) = sets[l + 1].children(grids[l]);
                debug_assert_eq!(children.len(), sets[l].len());
                up_rows.push(u32_tensor(&rows)?);
            }
        }
        let n0 = sets[0].len();
        let mut xyz = Vec::with_capacity(n0 * 3);
        for c in sets[0].coords() {
            for a in 0..3 {
                xyz.push((c[a] as f32 + 0.5) / dims[a] as f32 - 0.5);
            }
        }
        let coords = Tensor::from_vec(xyz, (n0, 3), store.device())?.to_dtype(store.dtype())?;
        let w = &cfg.widths;
        let token = cfg.conditioning.then_some(cfg.token_channels);
        let mut enc = Vec::with_capacity(levels);
        let mut dec = Vec::with_capacity(levels);
        let mut downs = Vec::new();
        let mut ups = Vec::new();
        let mut merge = Vec::new();
        for l in 0..levels {
            enc.push(ResBlock::new(store, &format!("unet.enc{l}"), w[l], cfg.time_dim, token)?);
            if l + 1 < levels {
                downs.push(SparseConv::down2(store, &format!("unet.down{l}"), w[l], w[l + 1])?);
                ups.push(Up2::new(store, &format!("unet.up{l}"), w[l + 1], w[l])?);
                merge.push(SparseConv::subm3(store, &format!("unet.merge{l}"), 2 * w[l], w[l])?);
                dec.push(ResBlock::new(store, &format!("unet.dec{l}"), w[l], cfg.time_dim, token)?);
            }
        }
        Ok(Self {
            latent_dim,
            time_dim: cfg.time_dim,
            coords,
            subm,
            down,
            pool,
            up_rows,
            input: SparseConv::subm3(store, "unet.input", latent_dim + 3, w[0])?,
            enc,
            downs,
            ups,
            merge,
            dec,
            out: Linear::new(store, "unet.out", w[0], latent_dim)?,
        })
    }

    pub fn num_cells(&self) -> usize {
        self.coords.dim(0).unwrap_or(0)
    }

    pub fn forward(&self, zt: &Tensor, t: usize, cond: &ConditionToken) -> Result<Tensor> {
        if zt.dims() != [self.num_cells(), self.latent_dim] {
            return Err(Error::ShapeMismatch(format!(
                "denoiser input {:?}, expected [{}, {}]",
                zt.dims(),
                self.num_cells(),
                self.latent_dim
            )));
        }
        let temb = time_embedding(t, self.time_dim, zt.dtype())?;
        let levels = self.enc.len();
        let mut tokens: Vec<Option<Tensor>> = Vec::with_capacity(levels);
        match cond {
            ConditionToken::Null => tokens.resize(levels, None),
            ConditionToken::Token(tok) => {
                if tok.dim(0)? != self.num_cells() {
                    return Err(Error::ShapeMismatch(format!(
                        "condition token has {} cells, latent grid {}",
                        tok.dim(0)?,
                        self.num_cells()
                    )));
                }
                tokens.push(Some(tok.clone()));
                for l in 1..levels {
                    let prev = tokens[l - 1].as_ref().expect("set above");
                    tokens.push(Some(pool8(prev, &self.pool[l - 1])?));
                }
            }
        }
        let x = Tensor::cat(&[zt, &self.coords], 1)?;
        let mut h = self.input.forward(&x, &self.subm[0])?;
        let mut skips = Vec::with_capacity(levels);
        for l in 0..levels {
            h = self.enc[l].forward(&h, &self.subm[l], &temb, tokens[l].as_ref())?;
            if l + 1 < levels {
                skips.push(h.clone());
                h = self.downs[l].forward(&h.silu()?, &self.down[l])?;
            }
        }
        for l in (0..levels - 1).rev() {
            let up = self.ups[l].forward(&h.silu()?, &self.up_rows[l])?;
            let cat = Tensor::cat(&[&up, &skips[l]], 1)?;
            h = self.merge[l].forward(&cat, &self.subm[l])?;
            h = self.dec[l].forward(&h, &self.subm[l], &temb, tokens[l].as_ref())?;
        }
        self.out.forward(&h.silu()?)
    }
}

/// Precomputed tables for one condition cloud.
pub struct CondPlan {
    input: Tensor,
    stem: Table,
    down: Vec<Table>,
    conv: Vec<Table>,
    slot: Tensor,
}

/// Sparse encoder of voxelized LiDAR occupancy onto the latent grid.
pub struct ConditionEncoder {
    grid: GridSpec,
    latent_dims: [usize; 3],
    stem: SparseConv,
    downs: Vec<SparseConv>,
    convs: Vec<SparseConv>,
    out: Linear,
}

impl ConditionEncoder {
    pub fn new(store: &mut ParamStore, cfg: &DiffusionConfig, grid: GridSpec, levels: usize) -> Result<Self> {
        let w = |l: usize| cfg.cond_widths[l.min(cfg.cond_widths.len() - 1)];
        let mut downs = Vec::with_capacity(levels);
        let mut convs = Vec::with_capacity(levels);
        for l in 1..=levels {
            downs.push(SparseConv::down2(store, &format!("cond.down{l}"), w(l - 1), w(l))?);
            convs.push(SparseConv::subm3(store, &format!("cond.conv{l}"), w(l), w(l))?);
        }
        Ok(Self {
            latent_dims: grid.downsampled_dims(levels),
            stem: SparseConv::subm3(store, "cond.stem", 4, w(0))?,
            out: Linear::new(store, "cond.out", w(levels), cfg.token_channels)?,
            grid,
            downs,
            convs,
        })
    }

    pub fn latent_dims(&self) -> [usize; 3] {
        self.latent_dims
    }

    /// Voxelizes the cloud into occupied scene cells; points outside the
    /// grid are dropped.
    pub fn occupancy(&self, cloud: &LidarCloud) -> Result<Vec<VoxelCoord>> {
        if cloud.is_empty() {
            return Err(Error::RejectedInput("empty condition cloud; use the null token instead".into()));
        }
        let mut cells: Vec<VoxelCoord> = cloud.points.iter().filter_map(|&p| self.grid.voxel_index(p)).collect();
        cells.sort_unstable();
        cells.dedup();
        if cells.is_empty() {
            return Err(Error::RejectedInput("no condition point falls inside the scene grid".into()));
        }
        Ok(cells)
    }

    pub fn plan(&self, cloud: &LidarCloud, dtype: DType) -> Result<CondPlan> {
        let cells = self.occupancy(cloud)?;
        let dims = self.grid.dims();
        let mut feats = Vec::with_capacity(cells.len() * 4);
        for c in &cells {
            feats.push(1.0f32);
            for a in 0..3 {
                feats.push((c[a] as f32 + 0.5) / dims[a] as f32 - 0.5);
            }
        }
        let input = Tensor::from_vec(feats, (cells.len(), 4), &candle_core::Device::Cpu)?.to_dtype(dtype)?;
        let mut set = CoordSet::new(dims, cells);
        let stem = Table::new(&set.subm3_table(), 27)?;
        let mut down = Vec::with_capacity(self.downs.len());
        let mut conv = Vec::with_capacity(self.downs.len());
        for _ in 0..self.downs.len() {
            let coarse = set.parents();
            down.push(Table::new(&set.down2_table(&coarse), 8)?);
            conv.push(Table::new(&coarse.subm3_table(), 27)?);
            set = coarse;
        }
        let n = set.len() as u32;
        let cells = self.latent_dims.iter().product::<usize>();
        let slot: Vec<u32> = (0..cells).map(|i| set.find(coord_of(self.latent_dims, i)).unwrap_or(n)).collect();
        Ok(CondPlan { input, stem, down, conv, slot: u32_tensor(&slot)? })
    }

    /// Dense token `(latent cells, token channels)`.
    pub fn forward(&self, plan: &CondPlan) -> Result<Tensor> {
        let mut h = self.stem.forward(&plan.input, &plan.stem)?.silu()?;
        for l in 0..self.downs.len() {
            h = self.downs[l].forward(&h, &plan.down[l])?.silu()?;
            h = (&h + self.convs[l].forward(&h, &plan.conv[l])?.silu()?)?;
        }
        scatter_rows(&self.out.forward(&h)?, &plan.slot)
    }

    pub fn encode(&self, cloud: &LidarCloud, dtype: DType) -> Result<ConditionToken> {
        Ok(ConditionToken::Token(self.forward(&self.plan(cloud, dtype)?)?))
    }
}
