//! Latent diffusion over dense autoencoder latents: noise schedule,
//! v-prediction objective with Min-SNR weighting, ancestral sampling and
//! classifier-free LiDAR conditioning.

pub mod cache;
mod sampler;
pub mod schedule;
mod train;
mod unet;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use cache::{read_latent, read_latent_dir, write_latent, LatentRecord};
pub use sampler::{guided_v, normal_like, sample_latent, sample_step};
pub use schedule::{
    corrupt, eps_from_v, make_schedule, min_snr_weight, v_target, z0_from_v, LossWeighting, NoiseSchedule,
};
pub use train::{
    generate, train_ddpm, training_loss, DdpmLog, DdpmModel, Generated, LatentSample, StepDraw, StepLog,
};
pub use unet::{ConditionEncoder, DenseUnet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionConfig {
    pub beta0: f64,
    pub beta_t: f64,
    pub steps: usize,
    pub weighting: LossWeighting,
    pub epochs: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub batch_size: usize,
    pub clip_norm: Option<f64>,
    pub max_steps: Option<usize>,
    /// Train and sample with a LiDAR condition encoder.
    pub conditioning: bool,
    /// Probability of replacing the condition by the null token in training.
    pub cond_drop: f64,
    /// Classifier-free guidance weight.
    pub guidance_w: f64,
    /// Denoiser channel widths, finest level first.
    pub widths: Vec<usize>,
    pub time_dim: usize,
    pub token_channels: usize,
    /// Condition encoder widths at scene resolution, then per downsampling.
    pub cond_widths: Vec<usize>,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            beta0: 1e-4,
            beta_t: 0.015,
            steps: 1000,
            weighting: LossWeighting::MinSnr { gamma: 5.0 },
            epochs: 150,
            lr: 2e-4,
            lr_decay: 0.8,
            lr_decay_every: 50,
            batch_size: 1,
            clip_norm: Some(1.0),
            max_steps: None,
            conditioning: false,
            cond_drop: 0.1,
            guidance_w: 2.0,
            widths: vec![64, 128, 256],
            time_dim: 64,
            token_channels: 16,
            cond_widths: vec![8, 16, 16, 32, 32],
        }
    }
}

impl DiffusionConfig {
    /// Small denoiser for toy latents.
    pub fn toy() -> Self {
        Self {
            epochs: 3000,
            lr: 1e-3,
            lr_decay: 0.5,
            lr_decay_every: 1000,
            widths: vec![64, 96],
            time_dim: 32,
            token_channels: 8,
            cond_widths: vec![4, 8, 8, 8],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        make_schedule(self.beta0, self.beta_t, self.steps)?;
        if let LossWeighting::MinSnr { gamma } = self.weighting {
            if !(gamma > 0.0 && gamma.is_finite()) {
                return Err(Error::Config(format!("min-snr gamma must be positive, got {gamma}")));
            }
        }
        if !(0.0..=1.0).contains(&self.cond_drop) {
            return Err(Error::Config(format!("cond_drop must lie in [0, 1], got {}", self.cond_drop)));
        }
        if !(self.guidance_w >= 0.0 && self.guidance_w.is_finite()) {
            return Err(Error::Config(format!("guidance weight must be non-negative, got {}", self.guidance_w)));
        }
        if self.widths.is_empty() || self.widths.contains(&0) || self.time_dim < 2 || self.time_dim % 2 != 0 {
            return Err(Error::Config("denoiser widths must be positive and time_dim even".into()));
        }
        if self.conditioning && (self.token_channels == 0 || self.cond_widths.contains(&0)) {
            return Err(Error::Config("condition encoder widths must be positive".into()));
        }
        if !(self.lr > 0.0) || self.batch_size == 0 {
            return Err(Error::Config("lr and batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_schedule(self.beta0, self.beta_t, self.steps)
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        crate::nn::optim::step_decay(self.lr, self.lr_decay, self.lr_decay_every, epoch)
    }
}

/// Encoded LiDAR condition on the latent grid, or the null token.
#[derive(Debug, Clone)]
pub enum ConditionToken {
    Null,
    /// `(latent cells, token channels)` in dense latent order.
    Token(Tensor),
}

impl ConditionToken {
    pub fn is_null(&self) -> bool {
        matches!(self, ConditionToken::Null)
    }
}

/// A network predicting `v` from a noisy latent `(cells, d_z)`.
pub trait Denoiser {
    fn predict_v(&self, zt: &Tensor, t: usize, cond: &ConditionToken) -> Result<Tensor>;
}
