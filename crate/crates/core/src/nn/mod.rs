//! Minimal training substrate on top of `candle-core` tensors: a seeded
//! parameter store, dense and sparse layers, optimizers and a checkpoint
//! container.

pub mod cancel;
pub mod checkpoint;
pub mod optim;
pub mod sparse;

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use checkpoint::{Checkpoint, NamedTensor, RngState};
pub use optim::{Adam, AdamConfig, Sgd};
pub use sparse::{CoordSet, SparseConv, Up2};

/// Parameter initializers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// `U(-b, b)`.
    Uniform(f64),
    Const(f64),
}

impl Init {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn fan_in(fan_in: usize) -> Self {
        Init::Uniform(1.0 / (fan_in.max(1) as f64).sqrt())
    }
}

/// Named trainable tensors. Each parameter is initialized from its own RNG
/// stream derived from the store seed and the parameter name, so the result
/// does not depend on construction order.
pub struct ParamStore {
    seed: u64,
    dtype: DType,
    device: Device,
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self { seed, dtype, device: Device::Cpu, vars: BTreeMap::new() }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Returns the parameter `name`, creating it with `init` on first use.
    pub fn get_or_init(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if let Some(v) = self.vars.get(name) {
            if v.dims() != shape {
                return Err(Error::ShapeMismatch(format!(
                    "parameter {name}: stored {:?}, requested {shape:?}",
                    v.dims()
                )));
            }
            return Ok(v.as_tensor().clone());
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Const(c) => vec![c; n],
            Init::Uniform(b) => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, name));
                (0..n).map(|_| rng.random_range(-b..=b)).collect()
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    /// Variables whose name starts with `prefix`, in name order.
    pub fn vars_with_prefix(&self, prefix: &str) -> Vec<Var> {
        self.vars.iter().filter(|(k, _)| k.starts_with(prefix)).map(|(_, v)| v.clone()).collect()
    }

    pub fn all_vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn num_params(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// SHA-256 over names, shapes and f64 values of the parameters under
    /// `prefix`.
    pub fn checksum(&self, prefix: &str) -> Result<String> {
        let mut h = Sha256::new();
        for (name, v) in self.vars.iter().filter(|(k, _)| k.starts_with(prefix)) {
            h.update(name.as_bytes());
            for d in v.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in v.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()? {
                h.update(x.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    pub fn export(&self) -> Result<Vec<NamedTensor>> {
        self.vars
            .iter()
            .map(|(name, v)| {
                Ok(NamedTensor {
                    name: name.clone(),
                    shape: v.dims().to_vec(),
                    data: v.as_tensor().flatten_all()?.to_dtype(DType::F32)?.to_vec1()?,
                })
            })
            .collect()
    }

    /// Overwrites or creates parameters from exported tensors.
    pub fn import(&mut self, tensors: &[NamedTensor]) -> Result<()> {
        for nt in tensors {
            let t = Tensor::from_slice(&nt.data, nt.shape.as_slice(), &self.device)?.to_dtype(self.dtype)?;
            match self.vars.get(&nt.name) {
                Some(v) if v.dims() == nt.shape.as_slice() => v.set(&t)?,
                Some(v) => {
                    return Err(Error::ShapeMismatch(format!(
                        "parameter {}: checkpoint {:?}, model {:?}",
                        nt.name,
                        nt.shape,
                        v.dims()
                    )))
                }
                None => {
                    self.vars.insert(nt.name.clone(), Var::from_tensor(&t)?);
                }
            }
        }
        Ok(())
    }
}

/// Stable 64-bit seed from a base seed and a label.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("digest has 32 bytes"))
}

/// Fully connected layer `x W + b` on `(N, cin)` rows.
#[derive(Debug, Clone)]
pub struct Linear {
    w: Tensor,
    b: Option<Tensor>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize) -> Result<Self> {
        let w = store.get_or_init(&format!("{name}.weight"), &[cin, cout], Init::fan_in(cin))?;
        let b = store.get_or_init(&format!("{name}.bias"), &[cout], Init::Const(0.0))?;
        Ok(Self { w, b: Some(b) })
    }

    pub fn no_bias(store: &mut ParamStore, name: &str, cin: usize, cout: usize) -> Result<Self> {
        let w = store.get_or_init(&format!("{name}.weight"), &[cin, cout], Init::fan_in(cin))?;
        Ok(Self { w, b: None })
    }

    /// Linear layer whose bias starts at `bias`.
    pub fn with_bias_init(store: &mut ParamStore, name: &str, cin: usize, cout: usize, bias: f64) -> Result<Self> {
        let w = store.get_or_init(&format!("{name}.weight"), &[cin, cout], Init::fan_in(cin))?;
        let b = store.get_or_init(&format!("{name}.bias"), &[cout], Init::Const(bias))?;
        Ok(Self { w, b: Some(b) })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&self.w)?;
        Ok(match &self.b {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }
}

/// Per-channel normalization over all rows of one sample, with a learned
/// affine.
#[derive(Debug, Clone)]
pub struct InstanceNorm {
    gamma: Tensor,
    beta: Tensor,
}

impl InstanceNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let gamma = store.get_or_init(&format!("{name}.gamma"), &[channels], Init::Const(1.0))?;
        let beta = store.get_or_init(&format!("{name}.beta"), &[channels], Init::Const(0.0))?;
        Ok(Self { gamma, beta })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(0)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(0)?;
        let y = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        Ok(y.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Logistic function as `exp(-softplus(-x))`, finite with finite gradients
/// for any input.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(softplus(&x.neg()?)?.neg()?.exp()?)
}

/// Row-wise log-softmax over the last dimension.
pub fn log_softmax(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    Ok((x.relu()? + (x.abs()?.neg()?.exp()? + 1.0)?.log()?)?)
}

/// Scalar value of a rank-0 or single-element tensor.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?[0])
}

pub fn u32_tensor(values: &[u32]) -> Result<Tensor> {
    Ok(Tensor::from_slice(values, values.len(), &Device::Cpu)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_order_independent() {
        let mut a = ParamStore::new(5, DType::F32);
        a.get_or_init("x", &[3], Init::Uniform(1.0)).unwrap();
        a.get_or_init("y", &[2], Init::Uniform(1.0)).unwrap();
        let mut b = ParamStore::new(5, DType::F32);
        b.get_or_init("y", &[2], Init::Uniform(1.0)).unwrap();
        b.get_or_init("x", &[3], Init::Uniform(1.0)).unwrap();
        assert_eq!(a.checksum("").unwrap(), b.checksum("").unwrap());
    }

    #[test]
    fn log_softmax_matches_hand_value() {
        let x = Tensor::new(&[[1.0f64, 0.0, 0.0]], &Device::Cpu).unwrap();
        let l = log_softmax(&x).unwrap().to_vec2::<f64>().unwrap();
        let expected = -(1.0f64 - (1f64.exp() + 2.0).ln());
        assert!((-l[0][0] - expected).abs() < 1e-12);
        assert!((-l[0][0] - 0.5514).abs() < 1e-4);
    }

    #[test]
    fn sigmoid_gradient_is_finite_for_extreme_logits() {
        let x = Var::from_tensor(&Tensor::new(&[-200.0f32, 0.0, 200.0], &Device::Cpu).unwrap()).unwrap();
        let y = sigmoid(x.as_tensor()).unwrap();
        assert_eq!(y.to_vec1::<f32>().unwrap(), vec![0.0, 0.5, 1.0]);
        let g = y.sum_all().unwrap().backward().unwrap();
        let g = g.get(x.as_tensor()).unwrap().to_vec1::<f32>().unwrap();
        assert!(g.iter().all(|v| v.is_finite()), "{g:?}");
        assert_eq!(g[1], 0.25);
    }

    #[test]
    fn softplus_is_stable() {
        let x = Tensor::new(&[-1000.0f64, 0.0, 1000.0], &Device::Cpu).unwrap();
        let y = softplus(&x).unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(y[0], 0.0);
        assert!((y[1] - 2f64.ln()).abs() < 1e-15);
        assert_eq!(y[2], 1000.0);
    }

    #[test]
    fn export_import_roundtrip() {
        let mut a = ParamStore::new(1, DType::F32);
        Linear::new(&mut a, "l", 3, 2).unwrap();
        let mut b = ParamStore::new(2, DType::F32);
        Linear::new(&mut b, "l", 3, 2).unwrap();
        assert_ne!(a.checksum("").unwrap(), b.checksum("").unwrap());
        b.import(&a.export().unwrap()).unwrap();
        assert_eq!(a.checksum("").unwrap(), b.checksum("").unwrap());
    }
}
