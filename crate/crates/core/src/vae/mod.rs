//! Sparse pruning autoencoder.
//!
//! The encoder maps a labeled voxel scene to a Gaussian latent on its
//! `L`-times downsampled occupancy. The decoder starts from the dense latent
//! grid and, at every upsampling stage, predicts an occupancy mask that
//! prunes empty cells and a semantic class for the survivors.

pub mod loss;
mod model;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use loss::LossParts;
pub(crate) use model::grid_from_json;
pub use model::{DecoderOutput, EncoderOutput, Gating, LayerStats, LevelPrediction, ScenePlan, Vae};
pub use train::{class_weights_from, refine_decoder, train_existing, train_vae, EpochLog, RefineLog, TrainLog};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeConfig {
    pub levels: usize,
    pub latent_dim: usize,
    /// Channels at levels `0..L`; the latent level reuses the last width.
    pub widths: Vec<usize>,
    pub num_classes: u8,
    /// Weight of upsampling stage `k = 1..=L`, coarsest first.
    pub lambda_levels: Vec<f64>,
    pub lambda_prune: f64,
    pub lambda_sem: f64,
    pub lambda_latent: f64,
    /// Per-class weights for the first training phase; inverse frequency of
    /// the training set when absent.
    pub class_weights: Option<Vec<f64>>,
    pub epochs: usize,
    /// Epochs trained with class weights before switching to uniform weights.
    pub weighted_epochs: Option<usize>,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub batch_size: usize,
    pub clip_norm: Option<f64>,
    /// Optional cap on optimizer steps.
    pub max_steps: Option<usize>,
    pub refine_noise: f64,
    pub refine_epochs: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            levels: 4,
            latent_dim: 16,
            widths: vec![32, 64, 128, 256],
            num_classes: crate::labels::NUM_CLASSES,
            lambda_levels: vec![1.0, 1.0, 2.0, 3.0],
            lambda_prune: 1.0,
            lambda_sem: 1.0,
            lambda_latent: 0.002,
            class_weights: None,
            epochs: 50,
            weighted_epochs: None,
            lr: 1e-4,
            lr_decay: 0.9,
            lr_decay_every: 5,
            batch_size: 1,
            clip_norm: None,
            max_steps: None,
            refine_noise: 0.1,
            refine_epochs: 10,
        }
    }
}

impl VaeConfig {
    /// Small network for the 64x64x16 procedural scenes.
    pub fn toy() -> Self {
        Self {
            levels: 3,
            latent_dim: 8,
            widths: vec![16, 32, 48],
            num_classes: crate::toy::NUM_TOY_CLASSES,
            lambda_levels: vec![1.0, 2.0, 3.0],
            epochs: 100,
            lr: 2e-3,
            lr_decay: 0.5,
            lr_decay_every: 30,
            clip_norm: Some(5.0),
            refine_epochs: 15,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::Config("vae.levels must be at least 1".into()));
        }
        if self.widths.len() != self.levels || self.widths.contains(&0) {
            return Err(Error::Config(format!(
                "vae.widths needs {} positive entries, got {:?}",
                self.levels, self.widths
            )));
        }
        if self.lambda_levels.len() != self.levels {
            return Err(Error::Config(format!(
                "vae.lambda_levels needs {} entries, got {}",
                self.levels,
                self.lambda_levels.len()
            )));
        }
        let weights = self
            .lambda_levels
            .iter()
            .chain([&self.lambda_prune, &self.lambda_sem, &self.lambda_latent])
            .chain(self.class_weights.iter().flatten());
        if weights.clone().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("loss and class weights must be finite and non-negative".into()));
        }
        if let Some(w) = &self.class_weights {
            if w.len() != self.num_classes as usize {
                return Err(Error::Config(format!("{} class weights for {} classes", w.len(), self.num_classes)));
            }
        }
        if self.latent_dim == 0 || self.num_classes == 0 || self.batch_size == 0 {
            return Err(Error::Config("latent_dim, num_classes and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.refine_noise >= 0.0) {
            return Err(Error::Config("vae.lr must be positive and refine_noise non-negative".into()));
        }
        Ok(())
    }

    /// Channel count of level `l` in `0..=L`.
    pub fn channels(&self, level: usize) -> usize {
        self.widths[level.min(self.levels - 1)]
    }

    pub fn weighted_epochs(&self) -> usize {
        self.weighted_epochs.unwrap_or(self.epochs / 2)
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        crate::nn::optim::step_decay(self.lr, self.lr_decay, self.lr_decay_every, epoch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = VaeConfig::default();
        c.validate().unwrap();
        assert_eq!(c.lr_at(0), 1e-4);
        assert!((c.lr_at(5) - 9e-5).abs() < 1e-18);
        assert!((c.lr_at(10) - 8.1e-5).abs() < 1e-18);
        assert_eq!(c.weighted_epochs(), 25);
        VaeConfig::toy().validate().unwrap();
    }

    #[test]
    fn invalid_configs() {
        let mut c = VaeConfig { widths: vec![8, 8], ..VaeConfig::default() };
        assert!(c.validate().is_err());
        c = VaeConfig { lambda_latent: -1.0, ..VaeConfig::default() };
        assert!(c.validate().is_err());
    }
}
