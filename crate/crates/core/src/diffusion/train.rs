//! Denoiser training, checkpointing and scene generation.

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use super::sampler::{normal_like, sample_latent};
use super::schedule::{corrupt, v_target, NoiseSchedule};
use super::unet::{CondPlan, ConditionEncoder, DenseUnet};
use super::{ConditionToken, Denoiser, DiffusionConfig};
use crate::error::{Error, Result};
use crate::lidar::LidarCloud;
use crate::nn::{cancel, derive_seed, scalar, Adam, AdamConfig, Checkpoint, ParamStore};
use crate::scene::{DenseLatent, GridSpec, VoxelScene};
use crate::vae::Vae;

const CHECKPOINT_KIND: &str = "ddpm";

/// Outcome of the random draws of one training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepDraw {
    pub t: usize,
    /// Whether a real condition was replaced by the null token.
    pub dropped: bool,
}

/// Draws `t ~ U{1..T}` and `eps ~ N(0, I)`, drops the condition with
/// probability `cfg.cond_drop` and returns
/// `lambda(t) * mean((v_theta - v)^2)`.
pub fn training_loss<M: Denoiser + ?Sized>(
    model: &M,
    z0: &Tensor,
    cond: &ConditionToken,
    cfg: &DiffusionConfig,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, StepDraw)> {
    let t = rng.random_range(1..=schedule.steps());
    let eps = normal_like(z0, rng)?;
    let dropped = rng.random::<f64>() < cfg.cond_drop && !cond.is_null();
    let zt = corrupt(z0, t, &eps, schedule)?;
    let target = v_target(z0, &eps, t, schedule)?;
    let cond = if dropped { &ConditionToken::Null } else { cond };
    let pred = model.predict_v(&zt, t, cond)?;
    let mse = (pred - target)?.sqr()?.mean_all()?;
    Ok(((mse * cfg.weighting.weight(t, schedule))?, StepDraw { t, dropped }))
}

/// One training latent with its optional LiDAR condition.
#[derive(Debug, Clone)]
pub struct LatentSample {
    pub id: String,
    pub latent: DenseLatent,
    pub cloud: Option<LidarCloud>,
}

#[derive(Debug, Clone, Serialize)]
pub struct StepLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct DdpmLog {
    pub epochs: Vec<StepLog>,
    pub steps: usize,
    pub null_draws: usize,
    pub cond_draws: usize,
    pub latent_scale: f64,
    pub cancelled: bool,
}

/// Denoiser, optional condition encoder and the latent normalization.
pub struct DdpmModel {
    cfg: DiffusionConfig,
    schedule: NoiseSchedule,
    store: ParamStore,
    unet: DenseUnet,
    cond: Option<ConditionEncoder>,
    grid: GridSpec,
    levels: usize,
    latent_dim: usize,
    scale: f64,
    fingerprint: String,
}

impl Denoiser for DdpmModel {
    fn predict_v(&self, zt: &Tensor, t: usize, cond: &ConditionToken) -> Result<Tensor> {
        self.unet.forward(zt, t, cond)
    }
}

impl DdpmModel {
    /// Untrained model for latents of a `levels`-times downsampled `grid`.
    pub fn new(cfg: DiffusionConfig, grid: GridSpec, levels: usize, latent_dim: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let schedule = cfg.schedule()?;
        let mut store = ParamStore::new(seed, DType::F32);
        let dims = grid.downsampled_dims(levels);
        let unet = DenseUnet::new(&mut store, &cfg, dims, latent_dim)?;
        let cond = if cfg.conditioning {
            Some(ConditionEncoder::new(&mut store, &cfg, grid.clone(), levels)?)
        } else {
            None
        };
        Ok(Self { cfg, schedule, store, unet, cond, grid, levels, latent_dim, scale: 1.0, fingerprint: String::new() })
    }

    pub fn config(&self) -> &DiffusionConfig {
        &self.cfg
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn latent_dims(&self) -> [usize; 3] {
        self.grid.downsampled_dims(self.levels)
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    /// Factor applied to latents before diffusion.
    pub fn latent_scale(&self) -> f64 {
        self.scale
    }

    /// Fingerprint of the encoder whose latents trained this model.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// Encodes a LiDAR cloud; fails when the model is unconditional.
    pub fn encode_condition(&self, cloud: &LidarCloud) -> Result<ConditionToken> {
        let enc = self
            .cond
            .as_ref()
            .ok_or_else(|| Error::Config("model was trained without conditioning".into()))?;
        enc.encode(cloud, self.store.dtype())
    }

    fn latent_tensor(&self, latent: &DenseLatent) -> Result<Tensor> {
        if latent.dims() != self.latent_dims() || latent.latent_dim() != self.latent_dim {
            return Err(Error::ShapeMismatch(format!(
                "latent {:?} x {} does not match model {:?} x {}",
                latent.dims(),
                latent.latent_dim(),
                self.latent_dims(),
                self.latent_dim
            )));
        }
        let t = Tensor::from_slice(latent.values(), (latent.num_cells(), self.latent_dim), self.store.device())?;
        Ok((t.to_dtype(self.store.dtype())? * self.scale)?)
    }

    /// Samples a latent (unscaled, ready for the decoder).
    pub fn sample(&self, seed: u64, cond: &ConditionToken, w: f64) -> Result<DenseLatent> {
        let like = Tensor::zeros((self.unet.num_cells(), self.latent_dim), self.store.dtype(), self.store.device())?;
        let z = (sample_latent(self, &self.schedule, &like, seed, cond, w)? / self.scale)?;
        DenseLatent::from_values(self.latent_dims(), self.latent_dim, z.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?)
    }

    pub fn to_checkpoint(&self, epoch: u64) -> Result<Checkpoint> {
        let g = &self.grid;
        Ok(Checkpoint {
            kind: CHECKPOINT_KIND.into(),
            config: serde_json::to_value(&self.cfg)?,
            epoch,
            rng: None,
            extra: json!({
                "grid": { "min": g.min_corner(), "dims": g.dims(), "resolution": g.resolution() },
                "levels": self.levels,
                "latent_dim": self.latent_dim,
                "latent_scale": self.scale,
                "fingerprint": self.fingerprint,
            }),
            tensors: self.store.export()?,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != CHECKPOINT_KIND {
            return Err(Error::format(format!("expected a ddpm checkpoint, found {:?}", ck.kind)));
        }
        let cfg: DiffusionConfig = serde_json::from_value(ck.config.clone())?;
        let grid = crate::vae::grid_from_json(&ck.extra["grid"])?;
        let field = |k: &str| ck.extra[k].as_u64().ok_or_else(|| Error::format(format!("checkpoint lacks {k}")));
        let levels = field("levels")? as usize;
        let latent_dim = field("latent_dim")? as usize;
        let mut model = Self::new(cfg, grid, levels, latent_dim, 0)?;
        model.scale = ck.extra["latent_scale"].as_f64().ok_or_else(|| Error::format("checkpoint lacks latent_scale"))?;
        model.fingerprint = ck.extra["fingerprint"].as_str().unwrap_or_default().to_string();
        let names: Vec<String> = model.store.names().map(String::from).collect();
        if let Some(missing) = names.iter().find(|n| !ck.tensors.iter().any(|t| &t.name == *n)) {
            return Err(Error::format(format!("checkpoint lacks parameter {missing}")));
        }
        model.store.import(&ck.tensors)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>, epoch: u64) -> Result<()> {
        self.to_checkpoint(epoch)?.save(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// `1 / std` of all latent entries (1 when degenerate).
fn latent_scale(samples: &[LatentSample]) -> f64 {
    let (mut n, mut sum, mut sq) = (0f64, 0f64, 0f64);
    for s in samples {
        for &v in s.latent.values() {
            n += 1.0;
            sum += v as f64;
            sq += (v as f64) * (v as f64);
        }
    }
    let var = sq / n.max(1.0) - (sum / n.max(1.0)).powi(2);
    if var > 1e-12 {
        1.0 / var.sqrt()
    } else {
        1.0
    }
}

/// Trains a denoiser on cached latents of a `levels`-times downsampled
/// `grid`. `fingerprint` records the encoder that produced them.
pub fn train_ddpm(
    samples: &[LatentSample],
    cfg: &DiffusionConfig,
    grid: &GridSpec,
    levels: usize,
    fingerprint: &str,
    seed: u64,
) -> Result<(DdpmModel, DdpmLog)> {
    let first = samples.first().ok_or_else(|| Error::RejectedInput("no training latents".into()))?;
    let mut model = DdpmModel::new(cfg.clone(), grid.clone(), levels, first.latent.latent_dim(), derive_seed(seed, "ddpm.init"))?;
    model.fingerprint = fingerprint.to_string();
    model.scale = latent_scale(samples);
    let z0: Vec<Tensor> = samples.iter().map(|s| model.latent_tensor(&s.latent)).collect::<Result<_>>()?;
    let plans: Vec<Option<CondPlan>> = samples
        .iter()
        .map(|s| match (&model.cond, &s.cloud) {
            (Some(enc), Some(cloud)) => enc.plan(cloud, model.store.dtype()).map(Some),
            _ => Ok(None),
        })
        .collect::<Result<_>>()?;
    let mut opt = Adam::new(model.store.all_vars(), AdamConfig { clip_norm: cfg.clip_norm, ..AdamConfig::default() })?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "ddpm.train"));
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut log = DdpmLog { latent_scale: model.scale, ..DdpmLog::default() };
    'epochs: for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let (mut sum, mut steps) = (0.0, 0);
        for batch in order.chunks(cfg.batch_size) {
            let mut total: Option<Tensor> = None;
            for &i in batch {
                let token = match (&model.cond, &plans[i]) {
                    (Some(enc), Some(plan)) => ConditionToken::Token(enc.forward(plan)?),
                    _ => ConditionToken::Null,
                };
                let (loss, draw) = training_loss(&model, &z0[i], &token, cfg, &model.schedule, &mut rng)?;
                if !token.is_null() {
                    log.cond_draws += 1;
                    log.null_draws += draw.dropped as usize;
                }
                let loss = (loss / batch.len() as f64)?;
                total = Some(match total {
                    Some(acc) => (acc + loss)?,
                    None => loss,
                });
            }
            let total = total.expect("non-empty batch");
            let value = scalar(&total)?;
            if !value.is_finite() {
                return Err(Error::Diverged { context: format!("ddpm epoch {epoch}, step {}", log.steps), loss: value });
            }
            opt.step(&total.backward()?, lr)?;
            sum += value;
            steps += 1;
            log.steps += 1;
            log.cancelled = cancel::requested();
            if log.cancelled || cfg.max_steps.is_some_and(|m| log.steps >= m) {
                log.epochs.push(StepLog { epoch, lr, loss: sum / steps as f64, steps });
                break 'epochs;
            }
        }
        if epoch % 50 == 0 {
            log::info!("ddpm epoch {epoch}: loss {:.5} lr {lr:.2e}", sum / steps.max(1) as f64);
        }
        log.epochs.push(StepLog { epoch, lr, loss: sum / steps.max(1) as f64, steps });
    }
    Ok((model, log))
}

#[derive(Debug, Clone)]
pub struct Generated {
    pub scene: VoxelScene,
    pub latent: DenseLatent,
    /// The decoder pruned every cell at some level.
    pub empty: bool,
}

/// Samples a latent and decodes it. With a condition cloud the prediction
/// is guided with weight `w`.
pub fn generate(model: &DdpmModel, vae: &Vae, seed: u64, cond: Option<&LidarCloud>, w: f64) -> Result<Generated> {
    if vae.latent_dims() != model.latent_dims() || vae.config().latent_dim != model.latent_dim {
        return Err(Error::ShapeMismatch("diffusion model and decoder disagree on the latent grid".into()));
    }
    if !(w >= 0.0 && w.is_finite()) {
        return Err(Error::Config(format!("guidance weight must be non-negative, got {w}")));
    }
    let token = match cond {
        Some(cloud) => model.encode_condition(cloud)?,
        None => ConditionToken::Null,
    };
    let latent = model.sample(seed, &token, w)?;
    let out = vae.decode(&latent)?;
    Ok(Generated { scene: out.scene, latent, empty: out.empty })
}
