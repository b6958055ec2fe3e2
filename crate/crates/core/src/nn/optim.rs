//! First-order optimizers over `candle` variables and learning-rate schedules.

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay.
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0, clip_norm: None }
    }
}

/// Adam with optional decoupled weight decay.
pub struct Adam {
    vars: Vec<Var>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
    cfg: AdamConfig,
}

impl Adam {
    pub fn new(vars: Vec<Var>, cfg: AdamConfig) -> Result<Self> {
        let m = vars.iter().map(|v| v.zeros_like()).collect::<candle_core::Result<Vec<_>>>()?;
        let v = m.clone();
        Ok(Self { vars, m, v, step: 0, cfg })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update; variables without a gradient are left untouched.
    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        self.step += 1;
        let scale = clip_scale(&self.vars, grads, self.cfg.clip_norm)?;
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        for (i, var) in self.vars.iter().enumerate() {
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            let g = (g * scale)?;
            let m = ((&self.m[i] * self.cfg.beta1)? + (&g * (1.0 - self.cfg.beta1))?)?;
            let v = ((&self.v[i] * self.cfg.beta2)? + (g.sqr()? * (1.0 - self.cfg.beta2))?)?;
            let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + self.cfg.eps)?)?;
            let mut next = (var.as_tensor() - (update * lr)?)?;
            if self.cfg.weight_decay > 0.0 {
                next = (next - (var.as_tensor() * (lr * self.cfg.weight_decay))?)?;
            }
            var.set(&next.detach())?;
            self.m[i] = m.detach();
            self.v[i] = v.detach();
        }
        Ok(())
    }
}

/// Stochastic gradient descent with heavy-ball momentum.
pub struct Sgd {
    vars: Vec<Var>,
    momentum: f64,
    buf: Vec<Option<Tensor>>,
    clip_norm: Option<f64>,
}

impl Sgd {
    pub fn new(vars: Vec<Var>, momentum: f64) -> Self {
        let buf = vec![None; vars.len()];
        Self { vars, momentum, buf, clip_norm: None }
    }

    pub fn with_clip(mut self, clip_norm: Option<f64>) -> Self {
        self.clip_norm = clip_norm;
        self
    }

    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        let scale = clip_scale(&self.vars, grads, self.clip_norm)?;
        for (i, var) in self.vars.iter().enumerate() {
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            let g = (g * scale)?;
            let b = match &self.buf[i] {
                Some(b) => ((b * self.momentum)? + g)?,
                None => g,
            };
            var.set(&(var.as_tensor() - (&b * lr)?)?.detach())?;
            self.buf[i] = Some(b.detach());
        }
        Ok(())
    }
}

fn clip_scale(vars: &[Var], grads: &GradStore, clip: Option<f64>) -> Result<f64> {
    let Some(max_norm) = clip else { return Ok(1.0) };
    let mut sq = 0.0;
    for v in vars {
        if let Some(g) = grads.get(v.as_tensor()) {
            sq += super::scalar(&g.sqr()?.sum_all()?)?;
        }
    }
    let norm = sq.sqrt();
    Ok(if norm > max_norm && norm.is_finite() { max_norm / norm } else { 1.0 })
}

/// `base * factor^(floor(epoch / every))`.
pub fn step_decay(base: f64, factor: f64, every: usize, epoch: usize) -> f64 {
    base * factor.powi((epoch / every.max(1)) as i32)
}

/// Cosine annealing from `base` at progress 0 to 0 at progress `total`.
pub fn cosine(base: f64, progress: f64, total: f64) -> f64 {
    let x = (progress / total).clamp(0.0, 1.0);
    0.5 * base * (1.0 + (std::f64::consts::PI * x).cos())
}
