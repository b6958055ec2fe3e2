//! Training loop and noisy-latent decoder refinement.

use candle_core::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::model::{ScenePlan, Vae};
use super::VaeConfig;
use crate::error::{Error, Result};
use crate::nn::{cancel, derive_seed, scalar, Adam, AdamConfig};
use crate::scene::VoxelScene;

/// Mean loss terms over one epoch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub weighted: bool,
    pub prune: f64,
    pub semantic: f64,
    pub latent: f64,
    pub total: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub steps: usize,
    pub class_weights: Vec<f64>,
    /// Stopped early on a cancellation request.
    pub cancelled: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct RefineLog {
    pub epochs: Vec<EpochLog>,
    pub steps: usize,
    pub noise: f64,
    pub encoder_checksum: String,
    pub cancelled: bool,
}

/// Inverse-frequency class weights `N / (C_present * n_c)` over full
/// resolution voxels; absent classes get weight 1.
pub fn class_weights_from(scenes: &[VoxelScene], num_classes: u8) -> Vec<f64> {
    let mut counts = vec![0u64; num_classes as usize];
    for s in scenes {
        for &l in s.labels() {
            if (1..=num_classes).contains(&l) {
                counts[l as usize - 1] += 1;
            }
        }
    }
    let total: u64 = counts.iter().sum();
    let present = counts.iter().filter(|&&n| n > 0).count().max(1) as f64;
    counts.iter().map(|&n| if n == 0 { 1.0 } else { total as f64 / (present * n as f64) }).collect()
}

fn check_dataset(dataset: &[VoxelScene]) -> Result<()> {
    let first = dataset.first().ok_or_else(|| Error::RejectedInput("empty training set".into()))?;
    if let Some(bad) = dataset.iter().find(|s| s.grid().dims() != first.grid().dims()) {
        return Err(Error::ShapeMismatch(format!(
            "training scenes disagree on grid dims: {:?} vs {:?}",
            first.grid().dims(),
            bad.grid().dims()
        )));
    }
    Ok(())
}

#[derive(Default)]
struct Running {
    prune: f64,
    semantic: f64,
    latent: f64,
    total: f64,
    steps: usize,
}

impl Running {
    fn log(&self, epoch: usize, lr: f64, weighted: bool) -> EpochLog {
        let n = self.steps.max(1) as f64;
        EpochLog {
            epoch,
            lr,
            weighted,
            prune: self.prune / n,
            semantic: self.semantic / n,
            latent: self.latent / n,
            total: self.total / n,
            steps: self.steps,
        }
    }
}

fn finite_or_diverged(value: f64, context: impl FnOnce() -> String) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { context: context(), loss: value })
    }
}

/// Trains a fresh autoencoder on `dataset`. The first
/// `cfg.weighted_epochs()` epochs use class-weighted cross-entropy, the rest
/// unweighted.
pub fn train_vae(dataset: &[VoxelScene], cfg: &VaeConfig, seed: u64) -> Result<(Vae, TrainLog)> {
    check_dataset(dataset)?;
    let vae = Vae::new(cfg.clone(), dataset[0].grid().clone(), derive_seed(seed, "vae.init"))?;
    let log = train_existing(&vae, dataset, seed)?;
    Ok((vae, log))
}

/// Continues optimizing all parameters of `vae` on `dataset`.
pub fn train_existing(vae: &Vae, dataset: &[VoxelScene], seed: u64) -> Result<TrainLog> {
    check_dataset(dataset)?;
    let cfg = vae.config().clone();
    let plans: Vec<ScenePlan> = dataset.iter().map(|s| vae.plan(s)).collect::<Result<_>>()?;
    let weights = match &cfg.class_weights {
        Some(w) => w.clone(),
        None => class_weights_from(dataset, cfg.num_classes),
    };
    let weight_tensor = Tensor::new(weights.as_slice(), &candle_core::Device::Cpu)?.to_dtype(vae.store().dtype())?;
    let mut opt = Adam::new(vae.all_vars(), AdamConfig { clip_norm: cfg.clip_norm, ..AdamConfig::default() })?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "vae.train"));
    let mut order: Vec<usize> = (0..plans.len()).collect();
    let mut log = TrainLog { class_weights: weights, ..TrainLog::default() };
    'epochs: for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let weighted = epoch < cfg.weighted_epochs();
        order.shuffle(&mut rng);
        let mut run = Running::default();
        for batch in order.chunks(cfg.batch_size) {
            let mut total: Option<Tensor> = None;
            let (mut p, mut s, mut l) = (0.0, 0.0, 0.0);
            for &i in batch {
                let eta = vae.normal(plans[i].latent_len(), cfg.latent_dim, &mut rng)?;
                let parts = vae.loss_parts(&plans[i], &eta, weighted.then_some(&weight_tensor))?;
                p += scalar(&parts.prune)?;
                s += scalar(&parts.semantic)?;
                l += scalar(&parts.latent)?;
                let t = (vae.total_loss(&parts)? / batch.len() as f64)?;
                total = Some(match total {
                    Some(acc) => (acc + t)?,
                    None => t,
                });
            }
            let total = total.expect("non-empty batch");
            let value = scalar(&total)?;
            finite_or_diverged(value, || format!("vae epoch {epoch}, step {}", log.steps))?;
            opt.step(&total.backward()?, lr)?;
            let b = batch.len() as f64;
            run.prune += p / b;
            run.semantic += s / b;
            run.latent += l / b;
            run.total += value;
            run.steps += 1;
            log.steps += 1;
            log.cancelled = cancel::requested();
            if log.cancelled || cfg.max_steps.is_some_and(|m| log.steps >= m) {
                log.epochs.push(run.log(epoch, lr, weighted));
                break 'epochs;
            }
        }
        let entry = run.log(epoch, lr, weighted);
        log::info!(
            "vae epoch {epoch}: total {:.4} prune {:.4} sem {:.4} kl {:.4} lr {lr:.2e}",
            entry.total,
            entry.prune,
            entry.semantic,
            entry.latent
        );
        log.epochs.push(entry);
    }
    Ok(log)
}

/// Fine-tunes only the decoder on mean latents perturbed by Gaussian noise
/// of standard deviation `noise` on every dense cell. The encoder is left
/// bit-identical.
pub fn refine_decoder(vae: &mut Vae, dataset: &[VoxelScene], noise: f64, seed: u64) -> Result<RefineLog> {
    check_dataset(dataset)?;
    if !(noise.is_finite() && noise >= 0.0) {
        return Err(Error::Config(format!("refinement noise {noise} must be finite and non-negative")));
    }
    let cfg = vae.config().clone();
    let before = vae.encoder_checksum()?;
    let plans: Vec<ScenePlan> = dataset.iter().map(|s| vae.plan(s)).collect::<Result<_>>()?;
    let means: Vec<Tensor> = plans
        .iter()
        .map(|p| {
            let (mean, _) = vae.encode_plan(p)?;
            Ok(vae.densify(p, &mean.detach())?.detach())
        })
        .collect::<Result<_>>()?;
    let cells = means.first().map(|m| m.dim(0)).transpose()?.unwrap_or(0);
    let mut opt = Adam::new(vae.decoder_vars(), AdamConfig { clip_norm: cfg.clip_norm, ..AdamConfig::default() })?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "vae.refine"));
    let mut order: Vec<usize> = (0..plans.len()).collect();
    let mut log = RefineLog { epochs: Vec::new(), steps: 0, noise, encoder_checksum: before.clone(), cancelled: false };
    'epochs: for epoch in 0..cfg.refine_epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut run = Running::default();
        for batch in order.chunks(cfg.batch_size) {
            let mut total: Option<Tensor> = None;
            let (mut p, mut s) = (0.0, 0.0);
            for &i in batch {
                let z = if noise > 0.0 {
                    (&means[i] + (vae.normal(cells, cfg.latent_dim, &mut rng)? * noise)?)?
                } else {
                    means[i].clone()
                };
                let (prune, semantic) = vae.decoder_losses(&plans[i], &z, None)?;
                p += scalar(&prune)?;
                s += scalar(&semantic)?;
                let t = ((((prune * cfg.lambda_prune)? + (semantic * cfg.lambda_sem)?)?) / batch.len() as f64)?;
                total = Some(match total {
                    Some(acc) => (acc + t)?,
                    None => t,
                });
            }
            let total = total.expect("non-empty batch");
            let value = scalar(&total)?;
            finite_or_diverged(value, || format!("refinement epoch {epoch}, step {}", log.steps))?;
            opt.step(&total.backward()?, lr)?;
            let b = batch.len() as f64;
            run.prune += p / b;
            run.semantic += s / b;
            run.total += value;
            run.steps += 1;
            log.steps += 1;
            if cancel::requested() {
                log.cancelled = true;
                log.epochs.push(run.log(epoch, lr, false));
                break 'epochs;
            }
        }
        let entry = run.log(epoch, lr, false);
        log::info!("refine epoch {epoch}: total {:.4} prune {:.4} sem {:.4}", entry.total, entry.prune, entry.semantic);
        log.epochs.push(entry);
    }
    let after = vae.encoder_checksum()?;
    if after != before {
        return Err(Error::Config("encoder parameters changed during decoder refinement".into()));
    }
    Ok(log)
}
