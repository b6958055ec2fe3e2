//! Ancestral sampling with classifier-free guidance.

use candle_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::schedule::{eps_from_v, NoiseSchedule};
use super::{ConditionToken, Denoiser};
use crate::error::Result;

/// Standard normal tensor with the shape and dtype of `like`.
pub fn normal_like(like: &Tensor, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let v: Vec<f64> = (0..like.elem_count()).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::from_vec(v, like.shape(), like.device())?.to_dtype(like.dtype())?)
}

/// One ancestral step `z_t -> z_{t-1}`:
/// `(z_t - beta_t / sqrt(1 - ab_t) eps) / sqrt(alpha_t) + sigma_t n` with
/// `sigma_t^2 = beta_t (1 - ab_{t-1}) / (1 - ab_t)` and no noise at `t = 1`.
pub fn sample_step(zt: &Tensor, v_pred: &Tensor, t: usize, s: &NoiseSchedule, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    s.check_step(t)?;
    let eps = eps_from_v(v_pred, zt, t, s)?;
    let beta = s.beta(t);
    let ab = s.alpha_bar(t);
    let mean = ((zt - (eps * (beta / (1.0 - ab).sqrt()))?)? / s.alpha(t).sqrt())?;
    if t == 1 {
        return Ok(mean);
    }
    let var = beta * (1.0 - s.alpha_bar_prev(t)) / (1.0 - ab);
    Ok((mean + (normal_like(zt, rng)? * var.sqrt())?)?)
}

/// `v_null + w (v_cond - v_null)`; a null condition needs a single pass.
pub fn guided_v<M: Denoiser + ?Sized>(model: &M, zt: &Tensor, t: usize, cond: &ConditionToken, w: f64) -> Result<Tensor> {
    let v_null = model.predict_v(zt, t, &ConditionToken::Null)?;
    if cond.is_null() {
        return Ok(v_null);
    }
    let v_cond = model.predict_v(zt, t, cond)?;
    Ok((&v_null + ((v_cond - &v_null)? * w)?)?)
}

/// Runs the full reverse chain from `z_T ~ N(0, I)` shaped like `like`.
pub fn sample_latent<M: Denoiser + ?Sized>(
    model: &M,
    s: &NoiseSchedule,
    like: &Tensor,
    seed: u64,
    cond: &ConditionToken,
    w: f64,
) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = normal_like(like, &mut rng)?;
    for t in (1..=s.steps()).rev() {
        let v = guided_v(model, &z, t, cond, w)?;
        z = sample_step(&z, &v, t, s, &mut rng)?.detach();
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::schedule::{corrupt, make_schedule, v_target};
    use candle_core::{DType, Device};
    use std::cell::Cell;

    /// Predicts the exact `v` of a fixed clean latent.
    struct Oracle {
        z0: Tensor,
        s: NoiseSchedule,
    }

    impl Denoiser for Oracle {
        fn predict_v(&self, zt: &Tensor, t: usize, _: &ConditionToken) -> Result<Tensor> {
            let ab = self.s.alpha_bar(t);
            Ok((((zt * ab.sqrt())? - &self.z0)? / (1.0 - ab).sqrt())?)
        }
    }

    struct Constant {
        null: f64,
        cond: f64,
        calls: Cell<usize>,
    }

    impl Denoiser for Constant {
        fn predict_v(&self, zt: &Tensor, _: usize, cond: &ConditionToken) -> Result<Tensor> {
            self.calls.set(self.calls.get() + 1);
            let c = if cond.is_null() { self.null } else { self.cond };
            Ok((zt.zeros_like()? + c)?)
        }
    }

    #[test]
    fn oracle_chain_recovers_clean_latent() {
        let s = make_schedule(1e-4, 0.015, 1000).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let like = Tensor::zeros((64, 4), DType::F64, &Device::Cpu).unwrap();
        let z0 = (normal_like(&like, &mut rng).unwrap() * 2.0).unwrap();
        let oracle = Oracle { z0: z0.clone(), s: s.clone() };
        let out = sample_latent(&oracle, &s, &like, 3, &ConditionToken::Null, 0.0).unwrap();
        let err = (out - &z0).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn oracle_v_matches_v_target() {
        let s = make_schedule(1e-4, 0.015, 1000).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let like = Tensor::zeros(16, DType::F64, &Device::Cpu).unwrap();
        let z0 = normal_like(&like, &mut rng).unwrap();
        let eps = normal_like(&like, &mut rng).unwrap();
        let oracle = Oracle { z0: z0.clone(), s: s.clone() };
        for t in [1, 400, 1000] {
            let zt = corrupt(&z0, t, &eps, &s).unwrap();
            let v = oracle.predict_v(&zt, t, &ConditionToken::Null).unwrap();
            let diff = (v - v_target(&z0, &eps, t, &s).unwrap()).unwrap().abs().unwrap().max_all().unwrap();
            assert!(diff.to_scalar::<f64>().unwrap() < 1e-9);
        }
    }

    #[test]
    fn final_step_is_deterministic() {
        let s = make_schedule(1e-4, 0.015, 10).unwrap();
        let z = Tensor::new(&[0.5f64, -1.0], &Device::Cpu).unwrap();
        let v = Tensor::new(&[0.1f64, 0.2], &Device::Cpu).unwrap();
        let a = sample_step(&z, &v, 1, &s, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = sample_step(&z, &v, 1, &s, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a.to_vec1::<f64>().unwrap(), b.to_vec1::<f64>().unwrap());
        let c = sample_step(&z, &v, 5, &s, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let d = sample_step(&z, &v, 5, &s, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_ne!(c.to_vec1::<f64>().unwrap(), d.to_vec1::<f64>().unwrap());
        assert!(sample_step(&z, &v, 0, &s, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    }

    #[test]
    fn guidance_is_linear() {
        let m = Constant { null: 0.25, cond: 1.75, calls: Cell::new(0) };
        let z = Tensor::zeros(3, DType::F64, &Device::Cpu).unwrap();
        let token = ConditionToken::Token(Tensor::zeros((3, 1), DType::F64, &Device::Cpu).unwrap());
        for w in [0.0, 1.0, 2.0] {
            let v = guided_v(&m, &z, 5, &token, w).unwrap().to_vec1::<f64>().unwrap();
            let expected = 0.25 + w * (1.75 - 0.25);
            assert!(v.iter().all(|x| (x - expected).abs() <= 1e-9));
        }
        m.calls.set(0);
        guided_v(&m, &z, 5, &ConditionToken::Null, 2.0).unwrap();
        assert_eq!(m.calls.get(), 1);
    }
}
