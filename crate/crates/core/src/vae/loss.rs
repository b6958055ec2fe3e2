//! Pruning, semantic and latent losses.

use candle_core::{DType, Tensor, D};

use crate::error::{Error, Result};
use crate::nn::{log_softmax, scalar, sigmoid, softplus, u32_tensor};
use crate::scene::ClassId;

const DICE_EPS: f64 = 1e-12;
const PROB_EPS: f64 = 1e-12;

/// Mean binary cross-entropy of probabilities `pred` against 0/1 `target`.
pub fn bce(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    let p = pred.clamp(PROB_EPS, 1.0 - PROB_EPS)?;
    let pos = (target * p.log()?)?;
    let neg = ((1.0 - target)? * (1.0 - &p)?.log()?)?;
    Ok((pos + neg)?.mean_all()?.neg()?)
}

/// Mean binary cross-entropy computed from logits.
pub fn bce_with_logits(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    Ok((softplus(logits)? - (logits * target)?)?.mean_all()?)
}

/// Soft dice loss `1 - 2 sum(p m) / (sum p + sum m)`.
pub fn dice(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    let inter = (pred * target)?.sum_all()?;
    let sizes = (pred.sum_all()? + target.sum_all()?)?;
    let ratio = (((inter * 2.0)? + DICE_EPS)? / (sizes + DICE_EPS)?)?;
    Ok((1.0 - ratio)?)
}

/// Weighted sum over levels of BCE plus dice, on probabilities.
pub fn prune_loss(pred: &[Tensor], target: &[Tensor], lambdas: &[f64]) -> Result<Tensor> {
    check_levels(pred.len(), target.len(), lambdas.len())?;
    let mut total: Option<Tensor> = None;
    for ((p, m), &lam) in pred.iter().zip(target).zip(lambdas) {
        if p.dims() != m.dims() {
            return Err(Error::ShapeMismatch(format!("mask {:?} vs target {:?}", p.dims(), m.dims())));
        }
        let lo = scalar(&p.min_all()?)?;
        let hi = scalar(&p.max_all()?)?;
        if p.elem_count() > 0 && !(lo >= 0.0 && hi <= 1.0) {
            return Err(Error::RejectedInput(format!("mask predictions span [{lo}, {hi}], outside [0, 1]")));
        }
        let term = ((bce(p, m)? + dice(p, m)?)? * lam)?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::RejectedInput("no levels".into()))
}

/// Same as [`prune_loss`] from mask logits, with a stable BCE.
pub fn prune_loss_logits(logits: &[Tensor], target: &[Tensor], lambdas: &[f64]) -> Result<Tensor> {
    check_levels(logits.len(), target.len(), lambdas.len())?;
    let mut total: Option<Tensor> = None;
    for ((z, m), &lam) in logits.iter().zip(target).zip(lambdas) {
        let term = ((bce_with_logits(z, m)? + dice(&sigmoid(z)?, m)?)? * lam)?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::RejectedInput("no levels".into()))
}

fn check_levels(a: usize, b: usize, c: usize) -> Result<()> {
    if a != b || a != c {
        return Err(Error::ShapeMismatch(format!("{a} predictions, {b} targets, {c} level weights")));
    }
    Ok(())
}

/// Converts class ids `1..=C` to zero-based indices.
pub fn class_indices(labels: &[ClassId], num_classes: usize) -> Result<Tensor> {
    let idx: Vec<u32> = labels
        .iter()
        .map(|&l| {
            if l == 0 || l as usize > num_classes {
                Err(Error::RejectedInput(format!("target label {l} outside 1..={num_classes}")))
            } else {
                Ok(l as u32 - 1)
            }
        })
        .collect::<Result<_>>()?;
    u32_tensor(&idx)
}

/// Weighted cross-entropy of one level: `sum_n w[s_n] * nll_n / N`.
/// `target` holds zero-based class indices; `weights` is `(C,)` or `None`
/// for the unweighted phase.
pub fn level_cross_entropy(logits: &Tensor, target: &Tensor, weights: Option<&Tensor>) -> Result<Tensor> {
    let n = logits.dim(0)?;
    if n == 0 {
        return Ok(Tensor::zeros((), logits.dtype(), logits.device())?);
    }
    let lp = log_softmax(logits)?;
    let nll = lp.gather(&target.unsqueeze(1)?, 1)?.squeeze(1)?.neg()?;
    let weighted = match weights {
        Some(w) => (nll * w.index_select(target, 0)?)?,
        None => nll,
    };
    Ok((weighted.sum_all()? / n as f64)?)
}

/// Sum over levels of [`level_cross_entropy`], with targets as class ids.
pub fn semantic_loss(logits: &[Tensor], targets: &[Vec<ClassId>], weights: Option<&Tensor>) -> Result<Tensor> {
    if logits.len() != targets.len() || logits.is_empty() {
        return Err(Error::ShapeMismatch(format!("{} logit levels, {} target levels", logits.len(), targets.len())));
    }
    let mut total: Option<Tensor> = None;
    for (z, t) in logits.iter().zip(targets) {
        if z.dim(0)? != t.len() {
            return Err(Error::ShapeMismatch(format!("{} logit rows, {} targets", z.dim(0)?, t.len())));
        }
        let idx = class_indices(t, z.dim(D::Minus1)?)?;
        let term = level_cross_entropy(z, &idx, weights)?;
        total = Some(match total {
            Some(acc) => (acc + term)?,
            None => term,
        });
    }
    Ok(total.expect("non-empty levels"))
}

/// KL divergence of a diagonal Gaussian from the standard normal, averaged
/// over latent entries.
pub fn latent_loss(mean: &Tensor, logvar: &Tensor) -> Result<Tensor> {
    if mean.dims() != logvar.dims() {
        return Err(Error::ShapeMismatch(format!("mean {:?} vs logvar {:?}", mean.dims(), logvar.dims())));
    }
    if mean.elem_count() == 0 {
        return Ok(Tensor::zeros((), mean.dtype(), mean.device())?);
    }
    let finite = |t: &Tensor| -> Result<bool> {
        let v = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        Ok(v.iter().all(|x| x.is_finite()))
    };
    if !finite(mean)? || !finite(logvar)? {
        return Err(Error::RejectedInput("non-finite latent statistics".into()));
    }
    Ok(latent_loss_unchecked(mean, logvar)?)
}

pub(crate) fn latent_loss_unchecked(mean: &Tensor, logvar: &Tensor) -> candle_core::Result<Tensor> {
    (((logvar.exp()? + mean.sqr()?)? - 1.0)? - logvar)?.mean_all()? * 0.5
}

/// Individual loss terms.
#[derive(Debug, Clone)]
pub struct LossParts {
    pub prune: Tensor,
    pub semantic: Tensor,
    pub latent: Tensor,
}

/// `lambda_prune * prune + lambda_sem * semantic + lambda_latent * latent`.
pub fn vae_loss(parts: &LossParts, lambda_prune: f64, lambda_sem: f64, lambda_latent: f64) -> Result<Tensor> {
    Ok((((&parts.prune * lambda_prune)? + (&parts.semantic * lambda_sem)?)? + (&parts.latent * lambda_latent)?)?)
}
