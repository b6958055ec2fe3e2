//! Encoder, pruning decoder and per-scene execution plans.

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::json;

use super::loss::{self, LossParts};
use super::VaeConfig;
use crate::error::{Error, Result};
use crate::nn::sparse::{mask_tensor, scatter_rows, Table};
use crate::nn::{sigmoid, u32_tensor, Checkpoint, CoordSet, Linear, ParamStore, RngState, SparseConv, Up2};
use crate::scene::latent::coord_of;
use crate::scene::{
    downsample_scene, ClassId, DenseLatent, GridSpec, HierarchyTargets, SparseLatent, VoxelCoord, VoxelScene,
};

pub(crate) const ENCODER_PREFIX: &str = "enc.";
pub(crate) const DECODER_PREFIX: &str = "dec.";
const CHECKPOINT_KIND: &str = "vae";
const LOGVAR_MIN: f64 = -30.0;
const LOGVAR_MAX: f64 = 20.0;

/// Which cells continue to the next upsampling stage.
#[derive(Debug, Clone, Copy)]
pub enum Gating<'a> {
    /// Cells whose predicted occupancy is at least 0.5.
    Predicted,
    /// Ground-truth occupancy (teacher forcing, or an oracle mask).
    Teacher(&'a HierarchyTargets),
    /// Every candidate child survives.
    Unpruned,
}

#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub mean: SparseLatent,
    pub logvar: SparseLatent,
    pub sample: SparseLatent,
}

/// Decoder result at one level.
#[derive(Debug, Clone)]
pub struct LevelPrediction {
    pub level: usize,
    /// Children of the previous survivors, sorted.
    pub candidates: Vec<VoxelCoord>,
    /// Occupancy probability per candidate.
    pub probs: Vec<f32>,
    /// Rows of `candidates` that survived pruning, ascending.
    pub survivors: Vec<u32>,
    /// Class logits, `survivors.len() x C` row-major.
    pub logits: Vec<f32>,
}

impl LevelPrediction {
    pub fn survivor_coords(&self) -> impl Iterator<Item = VoxelCoord> + '_ {
        self.survivors.iter().map(|&r| self.candidates[r as usize])
    }
}

/// Feature memory of one upsampling stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub struct LayerStats {
    pub level: usize,
    pub cells: usize,
    pub channels: usize,
    pub bytes: usize,
}

#[derive(Debug, Clone)]
pub struct DecoderOutput {
    pub scene: VoxelScene,
    /// Coarsest first; the last entry is the full-resolution level.
    pub levels: Vec<LevelPrediction>,
    /// Set when some level had no survivors.
    pub empty: bool,
    pub stats: Vec<LayerStats>,
}

impl DecoderOutput {
    pub fn total_bytes(&self) -> usize {
        self.stats.iter().map(|s| s.bytes).sum()
    }
}

struct Encoder {
    stem: SparseConv,
    down: Vec<SparseConv>,
    conv: Vec<SparseConv>,
    mu: Linear,
    logvar: Linear,
}

struct Decoder {
    input: SparseConv,
    up: Vec<Up2>,
    conv: Vec<SparseConv>,
    mask: Vec<Linear>,
    sem: Vec<Linear>,
}

struct EncPlan {
    input: Tensor,
    stem: Table,
    down: Vec<Table>,
    conv: Vec<Table>,
    latent_coords: Vec<VoxelCoord>,
    /// Dense latent cell to encoder row, or the sentinel.
    slot: Tensor,
}

struct LayerPlan {
    up_rows: Tensor,
    table: Table,
}

struct TeacherLayer {
    plan: LayerPlan,
    target: Tensor,
    survivors: Tensor,
    labels: Vec<ClassId>,
}

/// Neighbor tables and targets of one training scene under teacher forcing.
pub struct ScenePlan {
    enc: EncPlan,
    layers: Vec<TeacherLayer>,
}

impl ScenePlan {
    pub fn latent_len(&self) -> usize {
        self.enc.latent_coords.len()
    }
}

/// Sparse pruning autoencoder with its parameters.
pub struct Vae {
    cfg: VaeConfig,
    grid: GridSpec,
    store: ParamStore,
    enc: Encoder,
    dec: Decoder,
    latent_table: Table,
}

impl Vae {
    pub fn new(cfg: VaeConfig, grid: GridSpec, seed: u64) -> Result<Self> {
        Self::with_dtype(cfg, grid, seed, DType::F32)
    }

    pub fn with_dtype(cfg: VaeConfig, grid: GridSpec, seed: u64, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let max = crate::scene::hierarchy::max_useful_levels(grid.dims());
        if cfg.levels > max {
            return Err(Error::Config(format!(
                "{} levels exceed the {} useful halvings of grid {:?}",
                cfg.levels,
                max,
                grid.dims()
            )));
        }
        let mut store = ParamStore::new(seed, dtype);
        let c = cfg.num_classes as usize;
        let levels = cfg.levels;
        let ch = |l: usize| cfg.channels(l);
        let enc = Encoder {
            stem: SparseConv::subm3(&mut store, "enc.stem", 3 + c, ch(0))?,
            down: (1..=levels)
                .map(|l| SparseConv::down2(&mut store, &format!("enc.down{l}"), ch(l - 1), ch(l)))
                .collect::<Result<_>>()?,
            conv: (1..=levels)
                .map(|l| SparseConv::subm3(&mut store, &format!("enc.conv{l}"), ch(l), ch(l)))
                .collect::<Result<_>>()?,
            mu: Linear::new(&mut store, "enc.mu", ch(levels), cfg.latent_dim)?,
            logvar: Linear::new(&mut store, "enc.logvar", ch(levels), cfg.latent_dim)?,
        };
        let mut dec = Decoder {
            input: SparseConv::subm3(&mut store, "dec.input", cfg.latent_dim, ch(levels))?,
            up: Vec::new(),
            conv: Vec::new(),
            mask: Vec::new(),
            sem: Vec::new(),
        };
        for k in 1..=levels {
            let l = levels - k;
            dec.up.push(Up2::new(&mut store, &format!("dec.up{k}"), ch(l + 1), ch(l))?);
            dec.conv.push(SparseConv::subm3(&mut store, &format!("dec.conv{k}"), ch(l), ch(l))?);
            dec.mask.push(Linear::new(&mut store, &format!("dec.mask{k}"), ch(l), 1)?);
            dec.sem.push(Linear::new(&mut store, &format!("dec.sem{k}"), ch(l), c)?);
        }
        let latent_dims = grid.downsampled_dims(levels);
        let latent_table = Table::new(&CoordSet::dense(latent_dims).subm3_table(), 27)?;
        Ok(Self { cfg, grid, store, enc, dec, latent_table })
    }

    pub fn config(&self) -> &VaeConfig {
        &self.cfg
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn latent_dims(&self) -> [usize; 3] {
        self.grid.downsampled_dims(self.cfg.levels)
    }

    pub fn encoder_checksum(&self) -> Result<String> {
        self.store.checksum(ENCODER_PREFIX)
    }

    pub fn decoder_checksum(&self) -> Result<String> {
        self.store.checksum(DECODER_PREFIX)
    }

    fn dtype(&self) -> DType {
        self.store.dtype()
    }

    fn check_scene(&self, scene: &VoxelScene) -> Result<()> {
        if scene.grid().dims() != self.grid.dims() {
            return Err(Error::ShapeMismatch(format!(
                "scene grid {:?} does not match model grid {:?}",
                scene.grid().dims(),
                self.grid.dims()
            )));
        }
        if scene.num_classes() != self.cfg.num_classes {
            return Err(Error::ShapeMismatch(format!(
                "scene has {} classes, model {}",
                scene.num_classes(),
                self.cfg.num_classes
            )));
        }
        if scene.is_empty() {
            return Err(Error::RejectedInput("cannot encode an empty scene".into()));
        }
        Ok(())
    }

    fn enc_plan(&self, scene: &VoxelScene) -> Result<EncPlan> {
        let dims = self.grid.dims();
        let c = self.cfg.num_classes as usize;
        let mut feats = Vec::with_capacity(scene.len() * (3 + c));
        for (coord, label) in scene.iter() {
            for a in 0..3 {
                feats.push((coord[a] as f32 + 0.5) / dims[a] as f32 - 0.5);
            }
            for class in 1..=c {
                feats.push((class == label as usize) as u8 as f32);
            }
        }
        let input = Tensor::from_vec(feats, (scene.len(), 3 + c), self.store.device())?.to_dtype(self.dtype())?;
        let mut sets = vec![CoordSet::new(dims, scene.coords().to_vec())];
        let stem = Table::new(&sets[0].subm3_table(), 27)?;
        let mut down = Vec::with_capacity(self.cfg.levels);
        let mut conv = Vec::with_capacity(self.cfg.levels);
        for l in 1..=self.cfg.levels {
            let coarse = sets[l - 1].parents();
            down.push(Table::new(&sets[l - 1].down2_table(&coarse), 8)?);
            conv.push(Table::new(&coarse.subm3_table(), 27)?);
            sets.push(coarse);
        }
        let top = sets.pop().expect("at least one level");
        let latent_dims = self.latent_dims();
        let n = top.len() as u32;
        let slot: Vec<u32> = (0..latent_dims.iter().product::<usize>())
            .map(|i| top.find(coord_of(latent_dims, i)).unwrap_or(n))
            .collect();
        Ok(EncPlan { input, stem, down, conv, latent_coords: top.coords().to_vec(), slot: u32_tensor(&slot)? })
    }

    /// Builds the cached plan used for teacher-forced training.
    pub fn plan(&self, scene: &VoxelScene) -> Result<ScenePlan> {
        self.check_scene(scene)?;
        let enc = self.enc_plan(scene)?;
        let targets = downsample_scene(scene, self.cfg.levels)?;
        let mut parents = CoordSet::dense(self.latent_dims());
        let mut layers = Vec::with_capacity(self.cfg.levels);
        for k in 1..=self.cfg.levels {
            let level = targets.level(self.cfg.levels - k);
            let (cand, up_rows) = parents.children(level.dims);
            let truth = CoordSet::new(level.dims, level.coords.clone());
            let occupied: Vec<bool> = cand.coords().iter().map(|&c| truth.find(c).is_some()).collect();
            let survivors: Vec<u32> = (0..cand.len() as u32).filter(|&r| occupied[r as usize]).collect();
            debug_assert_eq!(survivors.len(), level.coords.len());
            layers.push(TeacherLayer {
                plan: LayerPlan { up_rows: u32_tensor(&up_rows)?, table: Table::new(&cand.subm3_table(), 27)? },
                target: mask_tensor(&occupied, self.dtype())?,
                survivors: u32_tensor(&survivors)?,
                labels: level.labels.clone(),
            });
            parents = truth;
        }
        Ok(ScenePlan { enc, layers })
    }

    fn encoder_forward(&self, p: &EncPlan) -> Result<(Tensor, Tensor)> {
        let mut h = self.enc.stem.forward(&p.input, &p.stem)?.silu()?;
        for l in 0..self.cfg.levels {
            h = self.enc.down[l].forward(&h, &p.down[l])?.silu()?;
            h = (&h + self.enc.conv[l].forward(&h, &p.conv[l])?.silu()?)?;
        }
        let logvar = self.enc.logvar.forward(&h)?.clamp(LOGVAR_MIN, LOGVAR_MAX)?;
        Ok((self.enc.mu.forward(&h)?, logvar))
    }

    fn decoder_input(&self, dense: &Tensor) -> Result<Tensor> {
        Ok(self.dec.input.forward(dense, &self.latent_table)?.silu()?)
    }

    /// Upsampling stage `k` (1-based, coarsest first): returns candidate
    /// features and mask logits.
    fn decoder_layer(&self, k: usize, x: &Tensor, plan: &LayerPlan) -> Result<(Tensor, Tensor)> {
        let i = k - 1;
        let h = self.dec.up[i].forward(x, &plan.up_rows)?.silu()?;
        let h = (&h + self.dec.conv[i].forward(&h, &plan.table)?.silu()?)?;
        let logits = self.dec.mask[i].forward(&h)?.squeeze(1)?;
        Ok((h, logits))
    }

    fn dense_tensor(&self, dense: &DenseLatent) -> Result<Tensor> {
        if dense.dims() != self.latent_dims() || dense.latent_dim() != self.cfg.latent_dim {
            return Err(Error::ShapeMismatch(format!(
                "dense latent {:?} x {} does not match model {:?} x {}",
                dense.dims(),
                dense.latent_dim(),
                self.latent_dims(),
                self.cfg.latent_dim
            )));
        }
        Ok(Tensor::from_slice(dense.values(), (dense.num_cells(), dense.latent_dim()), self.store.device())?
            .to_dtype(self.dtype())?)
    }

    /// Latent statistics on the planned scene: `(mean, logvar)`, each
    /// `(latent_len, d_z)`.
    pub(crate) fn encode_plan(&self, plan: &ScenePlan) -> Result<(Tensor, Tensor)> {
        self.encoder_forward(&plan.enc)
    }

    /// Scatters per-row latents of the planned scene onto the dense grid.
    pub(crate) fn densify(&self, plan: &ScenePlan, z: &Tensor) -> Result<Tensor> {
        scatter_rows(z, &plan.enc.slot)
    }

    /// Teacher-forced pruning and semantic losses from a dense latent.
    pub(crate) fn decoder_losses(
        &self,
        plan: &ScenePlan,
        dense: &Tensor,
        class_weights: Option<&Tensor>,
    ) -> Result<(Tensor, Tensor)> {
        let mut x = self.decoder_input(dense)?;
        let mut mask_logits = Vec::with_capacity(plan.layers.len());
        let mut targets = Vec::with_capacity(plan.layers.len());
        let mut sem_logits = Vec::with_capacity(plan.layers.len());
        let mut labels = Vec::with_capacity(plan.layers.len());
        for (i, layer) in plan.layers.iter().enumerate() {
            let (h, logits) = self.decoder_layer(i + 1, &x, &layer.plan)?;
            x = h.index_select(&layer.survivors, 0)?;
            sem_logits.push(self.dec.sem[i].forward(&x)?);
            labels.push(layer.labels.clone());
            mask_logits.push(logits);
            targets.push(layer.target.clone());
        }
        let prune = loss::prune_loss_logits(&mask_logits, &targets, &self.cfg.lambda_levels)?;
        let semantic = loss::semantic_loss(&sem_logits, &labels, class_weights)?;
        Ok((prune, semantic))
    }

    /// All three loss terms for one scene with the reparameterization noise
    /// `eta` (`(latent_len, d_z)`).
    pub fn loss_parts(&self, plan: &ScenePlan, eta: &Tensor, class_weights: Option<&Tensor>) -> Result<LossParts> {
        let (mean, logvar) = self.encode_plan(plan)?;
        let z = (&mean + (&logvar * 0.5)?.exp()?.mul(eta)?)?;
        let dense = self.densify(plan, &z)?;
        let (prune, semantic) = self.decoder_losses(plan, &dense, class_weights)?;
        let latent = loss::latent_loss_unchecked(&mean, &logvar)?;
        Ok(LossParts { prune, semantic, latent })
    }

    /// Weighted total of [`Vae::loss_parts`].
    pub fn total_loss(&self, parts: &LossParts) -> Result<Tensor> {
        loss::vae_loss(parts, self.cfg.lambda_prune, self.cfg.lambda_sem, self.cfg.lambda_latent)
    }

    pub(crate) fn normal(&self, rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let v: Vec<f32> = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
        Ok(Tensor::from_vec(v, (rows, cols), self.store.device())?.to_dtype(self.dtype())?)
    }

    fn to_sparse(&self, coords: &[VoxelCoord], t: &Tensor) -> Result<SparseLatent> {
        let values = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        SparseLatent::new(self.latent_dims(), self.cfg.latent_dim, coords.to_vec(), values)
    }

    /// Encodes `scene`; the sample uses noise drawn from `seed`.
    pub fn encode(&self, scene: &VoxelScene, seed: u64) -> Result<EncoderOutput> {
        self.check_scene(scene)?;
        let plan = self.enc_plan(scene)?;
        let (mean, logvar) = self.encoder_forward(&plan)?;
        let lv = logvar.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        if lv.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged { context: "encoder log-variance".into(), loss: f64::NAN });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eta = self.normal(plan.latent_coords.len(), self.cfg.latent_dim, &mut rng)?;
        let sample = (&mean + (&logvar * 0.5)?.exp()?.mul(&eta)?)?;
        Ok(EncoderOutput {
            mean: self.to_sparse(&plan.latent_coords, &mean)?,
            logvar: self.to_sparse(&plan.latent_coords, &logvar)?,
            sample: self.to_sparse(&plan.latent_coords, &sample)?,
        })
    }

    /// Deterministic encoding: the latent mean.
    pub fn encode_mean(&self, scene: &VoxelScene) -> Result<SparseLatent> {
        self.check_scene(scene)?;
        let plan = self.enc_plan(scene)?;
        let (mean, _) = self.encoder_forward(&plan)?;
        self.to_sparse(&plan.latent_coords, &mean)
    }

    /// Decodes with predicted pruning masks.
    pub fn decode(&self, dense: &DenseLatent) -> Result<DecoderOutput> {
        self.decode_with(dense, Gating::Predicted)
    }

    pub fn decode_with(&self, dense: &DenseLatent, gating: Gating<'_>) -> Result<DecoderOutput> {
        let levels = self.cfg.levels;
        if let Gating::Teacher(t) = gating {
            if t.depth() != levels || t.level(0).dims != self.grid.dims() {
                return Err(Error::ShapeMismatch("teacher targets do not match the model hierarchy".into()));
            }
        }
        let c = self.cfg.num_classes as usize;
        let mut x = self.decoder_input(&self.dense_tensor(dense)?)?;
        let mut parents = CoordSet::dense(self.latent_dims());
        let mut out_levels = Vec::with_capacity(levels);
        let mut stats = Vec::with_capacity(levels);
        let mut empty = false;
        let mut scene = VoxelScene::empty(self.grid.clone(), self.cfg.num_classes);
        for k in 1..=levels {
            let level = levels - k;
            let dims = self.grid.downsampled_dims(level);
            let channels = self.cfg.channels(level);
            if parents.is_empty() {
                empty = true;
                out_levels.push(LevelPrediction {
                    level,
                    candidates: Vec::new(),
                    probs: Vec::new(),
                    survivors: Vec::new(),
                    logits: Vec::new(),
                });
                stats.push(LayerStats { level, cells: 0, channels, bytes: 0 });
                continue;
            }
            let (cand, up_rows) = parents.children(dims);
            let plan = LayerPlan { up_rows: u32_tensor(&up_rows)?, table: Table::new(&cand.subm3_table(), 27)? };
            let (h, logits) = self.decoder_layer(k, &x, &plan)?;
            stats.push(LayerStats { level, cells: cand.len(), channels, bytes: cand.len() * channels * 4 });
            let probs = sigmoid(&logits)?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
            let survivors: Vec<u32> = match gating {
                Gating::Predicted => (0..cand.len() as u32).filter(|&r| probs[r as usize] >= 0.5).collect(),
                Gating::Unpruned => (0..cand.len() as u32).collect(),
                Gating::Teacher(t) => {
                    let truth = CoordSet::new(dims, t.level(level).coords.clone());
                    (0..cand.len() as u32).filter(|&r| truth.find(cand.coords()[r as usize]).is_some()).collect()
                }
            };
            let (next_x, sem) = if survivors.is_empty() {
                empty = true;
                (None, Vec::new())
            } else {
                let hs = h.index_select(&u32_tensor(&survivors)?, 0)?;
                let sem = self.dec.sem[k - 1].forward(&hs)?.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
                (Some(hs), sem)
            };
            if level == 0 {
                let occupied: Vec<u32> = (0..cand.len() as u32).filter(|&r| probs[r as usize] >= 0.5).collect();
                let occ_logits = if occupied == survivors {
                    sem.clone()
                } else if occupied.is_empty() {
                    Vec::new()
                } else {
                    let ho = h.index_select(&u32_tensor(&occupied)?, 0)?;
                    self.dec.sem[k - 1].forward(&ho)?.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?
                };
                let coords = occupied.iter().map(|&r| cand.coords()[r as usize]).collect();
                let labels = occ_logits.chunks_exact(c).map(|row| argmax(row) as ClassId + 1).collect();
                scene = VoxelScene::new(self.grid.clone(), self.cfg.num_classes, coords, labels)?;
            }
            parents = cand.select(&survivors);
            out_levels.push(LevelPrediction {
                level,
                candidates: cand.coords().to_vec(),
                probs,
                survivors,
                logits: sem,
            });
            if let Some(hs) = next_x {
                x = hs;
            }
        }
        empty |= scene.is_empty();
        Ok(DecoderOutput { scene, levels: out_levels, empty, stats })
    }

    /// `decode(pack_dense(encode_mean(scene)))`.
    pub fn reconstruct(&self, scene: &VoxelScene) -> Result<DecoderOutput> {
        let z = self.encode_mean(scene)?;
        self.decode(&crate::scene::pack_dense(&z)?)
    }

    /// Dense mean latent of a scene as stored in latent caches.
    pub fn dense_mean(&self, scene: &VoxelScene) -> Result<DenseLatent> {
        crate::scene::pack_dense(&self.encode_mean(scene)?)
    }

    pub(crate) fn decoder_vars(&self) -> Vec<candle_core::Var> {
        self.store.vars_with_prefix(DECODER_PREFIX)
    }

    pub(crate) fn all_vars(&self) -> Vec<candle_core::Var> {
        self.store.all_vars()
    }

    pub fn to_checkpoint(&self, epoch: u64, rng: Option<&ChaCha8Rng>) -> Result<Checkpoint> {
        let g = &self.grid;
        Ok(Checkpoint {
            kind: CHECKPOINT_KIND.into(),
            config: serde_json::to_value(&self.cfg)?,
            epoch,
            rng: rng.map(RngState::capture),
            extra: json!({
                "grid": { "min": g.min_corner(), "dims": g.dims(), "resolution": g.resolution() },
            }),
            tensors: self.store.export()?,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != CHECKPOINT_KIND {
            return Err(Error::format(format!("expected a vae checkpoint, found {:?}", ck.kind)));
        }
        let cfg: VaeConfig = serde_json::from_value(ck.config.clone())?;
        let grid = grid_from_json(&ck.extra["grid"])?;
        let mut vae = Self::new(cfg, grid, 0)?;
        let expected: Vec<String> = vae.store.names().map(String::from).collect();
        let found: Vec<&str> = ck.tensors.iter().map(|t| t.name.as_str()).collect();
        if let Some(missing) = expected.iter().find(|n| !found.contains(&n.as_str())) {
            return Err(Error::format(format!("checkpoint lacks parameter {missing}")));
        }
        vae.store.import(&ck.tensors)?;
        Ok(vae)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>, epoch: u64) -> Result<()> {
        self.to_checkpoint(epoch, None)?.save(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

pub(crate) fn grid_from_json(v: &serde_json::Value) -> Result<GridSpec> {
    #[derive(serde::Deserialize)]
    struct G {
        min: [f64; 3],
        dims: [usize; 3],
        resolution: f64,
    }
    let g: G = serde_json::from_value(v.clone()).map_err(|e| Error::format(format!("grid record: {e}")))?;
    GridSpec::from_dims(g.min, g.dims, g.resolution)
}

pub(crate) fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::scalar;

    fn micro_cfg() -> VaeConfig {
        VaeConfig {
            levels: 1,
            latent_dim: 2,
            widths: vec![2],
            num_classes: 2,
            lambda_levels: vec![1.5],
            lambda_latent: 0.3,
            ..VaeConfig::default()
        }
    }

    fn micro_scene() -> VoxelScene {
        let grid = GridSpec::from_dims([0.0; 3], [4, 4, 2], 1.0).unwrap();
        let coords = vec![[0, 0, 0], [0, 1, 0], [1, 1, 1], [2, 3, 0], [3, 3, 1]];
        VoxelScene::new(grid, 2, coords, vec![1, 2, 2, 1, 1]).unwrap()
    }

    fn toy_vae() -> (Vae, VoxelScene) {
        let scene = crate::toy::procedural_scene(3, [32, 32, 8]).unwrap();
        let cfg = VaeConfig { levels: 2, latent_dim: 4, widths: vec![4, 8], lambda_levels: vec![1.0, 2.0], ..VaeConfig::toy() };
        (Vae::new(cfg, scene.grid().clone(), 1).unwrap(), scene)
    }

    #[test]
    fn gradients_match_central_differences() {
        let scene = micro_scene();
        let vae = Vae::with_dtype(micro_cfg(), scene.grid().clone(), 11, DType::F64).unwrap();
        assert!(vae.store().num_params() <= 1000, "{}", vae.store().num_params());
        let plan = vae.plan(&scene).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let eta = vae.normal(plan.latent_len(), 2, &mut rng).unwrap();
        let w = Tensor::new(&[0.7f64, 1.9], &candle_core::Device::Cpu).unwrap();
        let total = |v: &Vae| -> Result<Tensor> {
            let parts = v.loss_parts(&plan, &eta, Some(&w))?;
            v.total_loss(&parts)
        };
        let grads = total(&vae).unwrap().backward().unwrap();
        let h = 1e-6;
        let mut checked = 0;
        for name in ["enc.stem.weight", "enc.mu.bias", "enc.logvar.weight", "dec.input.weight", "dec.up1.weight", "dec.mask1.bias", "dec.sem1.weight"] {
            let var = vae.store().get(name).unwrap().clone();
            let g = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let base = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            for idx in [0, base.len() / 2, base.len() - 1] {
                let eval = |delta: f64| {
                    let mut v = base.clone();
                    v[idx] += delta;
                    var.set(&Tensor::from_vec(v, var.shape(), var.device()).unwrap()).unwrap();
                    scalar(&total(&vae).unwrap()).unwrap()
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                var.set(&Tensor::from_vec(base.clone(), var.shape(), var.device()).unwrap()).unwrap();
                let err = (fd - g[idx]).abs() / fd.abs().max(g[idx].abs()).max(1e-6);
                assert!(err <= 1e-3, "{name}[{idx}]: analytic {} vs numeric {fd}", g[idx]);
                checked += 1;
            }
        }
        assert_eq!(checked, 21);
    }

    #[test]
    fn total_gradient_is_weighted_sum_of_parts() {
        let scene = micro_scene();
        let vae = Vae::with_dtype(micro_cfg(), scene.grid().clone(), 4, DType::F64).unwrap();
        let plan = vae.plan(&scene).unwrap();
        let eta = Tensor::zeros((plan.latent_len(), 2), DType::F64, &candle_core::Device::Cpu).unwrap();
        let parts = vae.loss_parts(&plan, &eta, None).unwrap();
        let var = vae.store().get("enc.mu.weight").unwrap();
        let grad = |t: &Tensor| t.backward().unwrap().get(var.as_tensor()).map(|g| g.flatten_all().unwrap().to_vec1::<f64>().unwrap());
        let gt = grad(&vae.total_loss(&parts).unwrap()).unwrap();
        let gp = grad(&parts.prune).unwrap();
        let gs = grad(&parts.semantic).unwrap();
        let gl = grad(&parts.latent).unwrap();
        for i in 0..gt.len() {
            let expected = gp[i] + gs[i] + 0.3 * gl[i];
            assert!((gt[i] - expected).abs() <= 1e-12 * (1.0 + expected.abs()));
        }
    }

    #[test]
    fn latent_coords_follow_downsampled_occupancy() {
        let (vae, scene) = toy_vae();
        let out = vae.encode(&scene, 0).unwrap();
        let targets = downsample_scene(&scene, 2).unwrap();
        assert_eq!(out.mean.coords(), targets.level(2).coords.as_slice());
        assert_eq!(out.mean.dims(), [8, 8, 2]);
        assert_eq!(out.sample.coords(), out.mean.coords());
        assert_eq!(out.logvar.features().len(), out.mean.features().len());
        assert_eq!(vae.encode(&scene, 5).unwrap().sample.features(), vae.encode(&scene, 5).unwrap().sample.features());
    }

    #[test]
    fn empty_scene_is_rejected() {
        let (vae, scene) = toy_vae();
        let empty = VoxelScene::empty(scene.grid().clone(), scene.num_classes());
        assert!(matches!(vae.encode(&empty, 0), Err(Error::RejectedInput(_))));
    }

    #[test]
    fn zero_latent_smoke() {
        let (vae, _) = toy_vae();
        let out = vae.decode(&DenseLatent::zeros(vae.latent_dims(), 4)).unwrap();
        assert_eq!(out.levels.len(), 2);
        let mut prev_survivors = vae.latent_dims().iter().product::<usize>();
        for lvl in &out.levels {
            assert!(lvl.probs.iter().all(|p| (0.0..=1.0).contains(p)));
            assert_eq!(lvl.logits.len(), lvl.survivors.len() * 4);
            assert!(lvl.candidates.len() <= 8 * prev_survivors);
            prev_survivors = lvl.survivors.len();
        }
        assert_eq!(out.empty, out.scene.is_empty() || out.levels.iter().any(|l| l.survivors.is_empty()));
        assert!(vae.decode(&DenseLatent::zeros([1, 1, 1], 4)).is_err());
    }

    #[test]
    fn survivors_are_contained_in_parent_children() {
        let (vae, scene) = toy_vae();
        let targets = downsample_scene(&scene, 2).unwrap();
        let dense = vae.dense_mean(&scene).unwrap();
        for gating in [Gating::Predicted, Gating::Unpruned, Gating::Teacher(&targets)] {
            let out = vae.decode_with(&dense, gating).unwrap();
            let mut parents: Vec<VoxelCoord> = CoordSet::dense(vae.latent_dims()).coords().to_vec();
            for lvl in &out.levels {
                let allowed: std::collections::HashSet<VoxelCoord> =
                    parents.iter().map(|p| *p).collect();
                for c in lvl.survivor_coords() {
                    assert!(allowed.contains(&[c[0] >> 1, c[1] >> 1, c[2] >> 1]));
                }
                parents = lvl.survivor_coords().collect();
            }
        }
        let teacher = vae.decode_with(&dense, Gating::Teacher(&targets)).unwrap();
        assert_eq!(teacher.levels[1].survivor_coords().collect::<Vec<_>>(), scene.coords());
        let unpruned = vae.decode_with(&dense, Gating::Unpruned).unwrap();
        assert_eq!(unpruned.stats[1].cells, 32 * 32 * 8);
        for (a, b) in teacher.stats.iter().zip(&unpruned.stats) {
            assert!(a.bytes <= b.bytes);
        }
    }

    #[test]
    fn deterministic_mode_is_pure() {
        let (vae, scene) = toy_vae();
        let a = vae.reconstruct(&scene).unwrap();
        let b = vae.reconstruct(&scene).unwrap();
        assert_eq!(a.scene, b.scene);
        assert_eq!(a.levels[0].probs, b.levels[0].probs);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let (vae, scene) = toy_vae();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vae.ckpt");
        vae.save(&path, 3).unwrap();
        let back = Vae::load(&path).unwrap();
        assert_eq!(back.config(), vae.config());
        assert_eq!(back.grid(), vae.grid());
        assert_eq!(back.encoder_checksum().unwrap(), vae.encoder_checksum().unwrap());
        assert_eq!(back.reconstruct(&scene).unwrap().scene, vae.reconstruct(&scene).unwrap().scene);
        let mut ck = Checkpoint::load(&path).unwrap();
        ck.tensors.retain(|t| t.name != "dec.sem1.bias");
        assert!(Vae::from_checkpoint(&ck).is_err());
    }
}
