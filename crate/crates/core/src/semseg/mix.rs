//! Real/synthetic training-set mixing.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::derive_seed;

/// How the synthetic share is sized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum MixMode {
    /// Real and synthetic samples together make up `total`; `None` uses the
    /// size of the real pool.
    Fill { total: Option<usize> },
    /// The selected real samples plus `extra` times as many synthetic ones.
    Extend { extra: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixSpec {
    pub real_fraction: f64,
    /// Name of the synthetic pool.
    pub source: String,
    pub mode: MixMode,
}

/// `floor(n * f)`, tolerant to the rounding of decimal fractions
/// (`19130 * 0.9` is `17216.999...` in binary).
pub fn floor_count(n: usize, f: f64) -> usize {
    (n as f64 * f + 1e-6).floor() as usize
}

impl MixSpec {
    pub fn fill(real_fraction: f64, source: impl Into<String>) -> Self {
        Self { real_fraction, source: source.into(), mode: MixMode::Fill { total: None } }
    }

    pub fn extend(real_fraction: f64, extra: f64, source: impl Into<String>) -> Self {
        Self { real_fraction, source: source.into(), mode: MixMode::Extend { extra } }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.real_fraction) {
            return Err(Error::Config(format!("real fraction must lie in [0, 1], got {}", self.real_fraction)));
        }
        match self.mode {
            MixMode::Fill { total: Some(0) } => Err(Error::Config("fill total must be positive".into())),
            MixMode::Extend { extra } if !(extra >= 0.0 && extra.is_finite()) => {
                Err(Error::Config(format!("extension fraction must be non-negative, got {extra}")))
            }
            _ => Ok(()),
        }
    }

    /// `(real, synthetic)` sample counts for a real pool of `real_pool` ids.
    pub fn counts(&self, real_pool: usize) -> Result<(usize, usize)> {
        self.validate()?;
        Ok(match self.mode {
            MixMode::Fill { total } => {
                let total = total.unwrap_or(real_pool);
                let real = floor_count(total, self.real_fraction);
                (real, total - real)
            }
            MixMode::Extend { extra } => {
                let real = floor_count(real_pool, self.real_fraction);
                (real, floor_count(real, extra))
            }
        })
    }

    /// Short cell label such as `10/90` or `100+75`.
    pub fn label(&self) -> String {
        let pct = |f: f64| format!("{}", (f * 1e4).round() / 1e2);
        match self.mode {
            MixMode::Fill { .. } => format!("{}/{}", pct(self.real_fraction), pct(1.0 - self.real_fraction)),
            MixMode::Extend { extra } => format!("{}+{}", pct(self.real_fraction), pct(extra)),
        }
    }
}

impl fmt::Display for MixSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "real={},source={}", self.real_fraction, self.source)?;
        match self.mode {
            MixMode::Fill { total: None } => write!(f, ",mode=fill"),
            MixMode::Fill { total: Some(t) } => write!(f, ",mode=fill,total={t}"),
            MixMode::Extend { extra } => write!(f, ",mode=extend,extra={extra}"),
        }
    }
}

/// Parses `real=0.25,mode=fill[,total=N][,source=S]` or
/// `real=1,mode=extend,extra=0.75[,source=S]`.
impl FromStr for MixSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (mut real, mut mode, mut total, mut extra, mut source) = (None, None, None, None, None);
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) =
                part.split_once('=').ok_or_else(|| Error::Config(format!("mix entry {part:?} is not key=value")))?;
            let num = |v: &str| v.parse::<f64>().map_err(|_| Error::Config(format!("mix value {v:?} is not a number")));
            match k {
                "real" => real = Some(num(v)?),
                "mode" => mode = Some(v.to_string()),
                "total" => {
                    total = Some(v.parse::<usize>().map_err(|_| Error::Config(format!("bad mix total {v:?}")))?)
                }
                "extra" => extra = Some(num(v)?),
                "source" => source = Some(v.to_string()),
                other => return Err(Error::Config(format!("unknown mix key {other:?}"))),
            }
        }
        let real_fraction = real.ok_or_else(|| Error::Config("mix needs real=".into()))?;
        let source = source.unwrap_or_else(|| "synthetic".into());
        let mode = match mode.as_deref().unwrap_or("fill") {
            "fill" if extra.is_none() => MixMode::Fill { total },
            "extend" if total.is_none() => {
                MixMode::Extend { extra: extra.ok_or_else(|| Error::Config("extend mode needs extra=".into()))? }
            }
            "fill" | "extend" => return Err(Error::Config("total= belongs to fill mode, extra= to extend mode".into())),
            m => return Err(Error::Config(format!("unknown mix mode {m:?}"))),
        };
        let spec = MixSpec { real_fraction, source, mode };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Real,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MixEntry {
    pub origin: Origin,
    pub id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixedSet {
    pub spec: MixSpec,
    pub entries: Vec<MixEntry>,
    pub real: usize,
    pub synthetic: usize,
}

fn pick(pool: &[String], n: usize, seed: u64, what: &str) -> Result<Vec<String>> {
    let unique: BTreeSet<&String> = pool.iter().collect();
    if unique.len() != pool.len() {
        return Err(Error::RejectedInput(format!("{what} pool contains duplicate ids")));
    }
    if n > pool.len() {
        return Err(Error::RejectedInput(format!("{what} pool has {} ids, {n} requested", pool.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = index::sample(&mut rng, pool.len(), n).into_vec();
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| pool[i].clone()).collect())
}

/// Draws a training set from the real and synthetic pools without
/// replacement and returns it in a shuffled order fixed by `seed`.
///
/// The real draw and the final order depend only on `seed`, so a mix without
/// synthetic samples is the same for every synthetic source.
pub fn mix_datasets(real: &[String], synth: &[String], spec: &MixSpec, seed: u64) -> Result<MixedSet> {
    let (n_real, n_synth) = spec.counts(real.len())?;
    let mut entries: Vec<MixEntry> = pick(real, n_real, derive_seed(seed, "mix.real"), "real")?
        .into_iter()
        .map(|id| MixEntry { origin: Origin::Real, id })
        .collect();
    entries.extend(
        pick(synth, n_synth, derive_seed(seed, "mix.synthetic"), "synthetic")?
            .into_iter()
            .map(|id| MixEntry { origin: Origin::Synthetic, id }),
    );
    entries.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "mix.order")));
    Ok(MixedSet { spec: spec.clone(), entries, real: n_real, synthetic: n_synth })
}
