//! Linear noise schedule, forward corruption and the v-parameterization.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `beta_t` for `t = 1..=T` with derived `alpha_t` and cumulative
/// `alpha_bar_t`. Accessors take the 1-based step.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Linear interpolation `beta_t = beta0 + (t-1)/(T-1) (betaT - beta0)`.
pub fn make_schedule(beta0: f64, beta_t: f64, steps: usize) -> Result<NoiseSchedule> {
    if !(beta0 > 0.0 && beta0 < beta_t && beta_t < 1.0) {
        return Err(Error::Config(format!("schedule needs 0 < beta0 < betaT < 1, got {beta0}, {beta_t}")));
    }
    if steps < 2 {
        return Err(Error::Config(format!("schedule needs at least 2 steps, got {steps}")));
    }
    let betas: Vec<f64> =
        (0..steps).map(|i| beta0 + i as f64 / (steps - 1) as f64 * (beta_t - beta0)).collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for a in &alphas {
        acc *= a;
        alpha_bars.push(acc);
    }
    Ok(NoiseSchedule { betas, alphas, alpha_bars })
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn idx(&self, t: usize) -> usize {
        assert!((1..=self.steps()).contains(&t), "step {t} outside 1..={}", self.steps());
        t - 1
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[self.idx(t)]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[self.idx(t)]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[self.idx(t)]
    }

    /// `alpha_bar_{t-1}`, with `alpha_bar_0 = 1`.
    pub fn alpha_bar_prev(&self, t: usize) -> f64 {
        if t == 1 {
            1.0
        } else {
            self.alpha_bar(t - 1)
        }
    }

    /// `alpha_bar / (1 - alpha_bar)`.
    pub fn snr(&self, t: usize) -> f64 {
        let ab = self.alpha_bar(t);
        ab / (1.0 - ab)
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if (1..=self.steps()).contains(&t) {
            Ok(())
        } else {
            Err(Error::RejectedInput(format!("step {t} outside 1..={}", self.steps())))
        }
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch(format!("{what}: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// `sqrt(ab) z0 + sqrt(1 - ab) eps`.
pub fn corrupt(z0: &Tensor, t: usize, eps: &Tensor, s: &NoiseSchedule) -> Result<Tensor> {
    same_shape(z0, eps, "corrupt")?;
    s.check_step(t)?;
    let ab = s.alpha_bar(t);
    Ok(((z0 * ab.sqrt())? + (eps * (1.0 - ab).sqrt())?)?)
}

/// `sqrt(ab) eps - sqrt(1 - ab) z0`.
pub fn v_target(z0: &Tensor, eps: &Tensor, t: usize, s: &NoiseSchedule) -> Result<Tensor> {
    same_shape(z0, eps, "v_target")?;
    s.check_step(t)?;
    let ab = s.alpha_bar(t);
    Ok(((eps * ab.sqrt())? - (z0 * (1.0 - ab).sqrt())?)?)
}

/// `sqrt(ab) v + sqrt(1 - ab) z_t`.
pub fn eps_from_v(v: &Tensor, zt: &Tensor, t: usize, s: &NoiseSchedule) -> Result<Tensor> {
    same_shape(v, zt, "eps_from_v")?;
    s.check_step(t)?;
    let ab = s.alpha_bar(t);
    Ok(((v * ab.sqrt())? + (zt * (1.0 - ab).sqrt())?)?)
}

/// `sqrt(ab) z_t - sqrt(1 - ab) v`.
pub fn z0_from_v(v: &Tensor, zt: &Tensor, t: usize, s: &NoiseSchedule) -> Result<Tensor> {
    same_shape(v, zt, "z0_from_v")?;
    s.check_step(t)?;
    let ab = s.alpha_bar(t);
    Ok(((zt * ab.sqrt())? - (v * (1.0 - ab).sqrt())?)?)
}

/// Per-step weight of the denoising loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossWeighting {
    /// `min(SNR, gamma) / (SNR + 1)`.
    MinSnr { gamma: f64 },
    Uniform,
}

impl LossWeighting {
    pub fn weight(&self, t: usize, s: &NoiseSchedule) -> f64 {
        match *self {
            LossWeighting::MinSnr { gamma } => min_snr_weight(t, s, gamma),
            LossWeighting::Uniform => 1.0,
        }
    }
}

pub fn min_snr_weight(t: usize, s: &NoiseSchedule, gamma: f64) -> f64 {
    min_snr_from_snr(s.snr(t), gamma)
}

pub fn min_snr_from_snr(snr: f64, gamma: f64) -> f64 {
    snr.min(gamma) / (snr + 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn standard() -> NoiseSchedule {
        make_schedule(1e-4, 0.015, 1000).unwrap()
    }

    #[test]
    fn endpoints_and_midpoint() {
        let s = standard();
        assert_eq!(s.beta(1), 1e-4);
        assert_eq!(s.beta(1000), 0.015);
        assert_eq!(s.alpha_bar(1), 1.0 - 1e-4);
        let expected = 1e-4 + 499.0 / 999.0 * (0.015 - 1e-4);
        assert!((s.beta(500) - expected).abs() < 1e-12);
        assert!((s.beta(500) - 7.542e-3).abs() < 1e-6);
        assert!((1..1000).all(|t| s.alpha_bar(t) > s.alpha_bar(t + 1)));
        assert!(s.alpha_bar(1000) > 0.0);
    }

    #[test]
    fn rejects_bad_ranges() {
        assert!(make_schedule(0.0, 0.01, 10).is_err());
        assert!(make_schedule(0.02, 0.01, 10).is_err());
        assert!(make_schedule(1e-4, 1.0, 10).is_err());
        assert!(make_schedule(1e-4, 0.01, 1).is_err());
    }

    #[test]
    fn corruption_special_cases() {
        let s = standard();
        let z = Tensor::new(&[1.0f64, -2.0], &Device::Cpu).unwrap();
        let zero = z.zeros_like().unwrap();
        let out = corrupt(&z, 10, &zero, &s).unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(out, vec![s.alpha_bar(10).sqrt(), -2.0 * s.alpha_bar(10).sqrt()]);
        let out = corrupt(&zero, 10, &z, &s).unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(out[0], (1.0 - s.alpha_bar(10)).sqrt());
        assert_eq!(v_target(&zero, &zero, 7, &s).unwrap().to_vec1::<f64>().unwrap(), vec![0.0, 0.0]);
        let bad = Tensor::zeros(3, DType::F64, &Device::Cpu).unwrap();
        assert!(corrupt(&z, 1, &bad, &s).is_err());
        assert!(corrupt(&z, 0, &zero, &s).is_err());
    }

    #[test]
    fn eps_from_v_zero_velocity() {
        let s = standard();
        let z = Tensor::new(&[3.0f64], &Device::Cpu).unwrap();
        let e = eps_from_v(&z.zeros_like().unwrap(), &z, 300, &s).unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(e[0], 3.0 * (1.0 - s.alpha_bar(300)).sqrt());
    }

    #[test]
    fn min_snr_values() {
        assert!((min_snr_from_snr(5.0, 5.0) - 5.0 / 6.0).abs() < 1e-15);
        assert!((min_snr_from_snr(1e-9, 5.0) - 1e-9).abs() < 1e-15);
        assert!(min_snr_from_snr(1e6, 5.0) < 1e-5);
        let s = standard();
        assert!(LossWeighting::MinSnr { gamma: 5.0 }.weight(1000, &s) < 0.01);
    }
}
