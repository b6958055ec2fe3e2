//! Downstream semantic segmentation: real/synthetic dataset mixing, a
//! sparse segmentation network and experiment grids over mixes.

mod experiment;
mod mix;
mod model;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels;
use crate::nn::optim::cosine;

pub use experiment::{run_experiment, ExperimentCell, ExperimentReport, ExperimentRow, SceneDir, ScenePool};
pub use mix::{floor_count, mix_datasets, MixEntry, MixMode, MixSpec, MixedSet, Origin};
pub use model::{
    evaluate_segmenter, new_confusion, train_segmenter, SegEpoch, SegLog, SegPlan, Segmenter, VoxelClassifier,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegConfig {
    /// Channel widths, finest level first; one downsampling per extra entry.
    pub widths: Vec<usize>,
    pub num_classes: u8,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub clip_norm: Option<f64>,
    pub max_steps: Option<usize>,
    /// Random x/y mirroring of training scenes.
    pub augment: bool,
}

impl Default for SegConfig {
    fn default() -> Self {
        Self {
            widths: vec![16, 32, 64, 128],
            num_classes: labels::NUM_CLASSES,
            epochs: 15,
            lr: 0.24,
            momentum: 0.9,
            clip_norm: None,
            max_steps: None,
            augment: false,
        }
    }
}

impl SegConfig {
    /// Narrower network for the 4-class toy scenes.
    pub fn toy() -> Self {
        Self { widths: vec![16, 32, 48, 64], num_classes: crate::toy::NUM_TOY_CLASSES, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config("segmenter widths must be non-empty and positive".into()));
        }
        if self.num_classes == 0 || self.epochs == 0 {
            return Err(Error::Config("num_classes and epochs must be positive".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("lr must be positive and momentum in [0, 1)".into()));
        }
        Ok(())
    }

    /// Learning rate at the start of `epoch`; reaches 0 after the last one.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        cosine(self.lr, epoch as f64, self.epochs as f64)
    }

    /// Learning rate of optimizer step `step` out of `total`.
    pub fn lr_at_step(&self, step: usize, total: usize) -> f64 {
        cosine(self.lr, step as f64, total.max(1) as f64)
    }
}
