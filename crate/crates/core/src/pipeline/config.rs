//! Run configuration: every module's parameters under a section prefix,
//! read from a flat `section.key = value` file, `VOXDIFF_SECTION__KEY`
//! environment variables and command-line `--set` flags, in increasing
//! precedence over the built-in defaults.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::diffusion::DiffusionConfig;
use crate::error::{Error, Result};
use crate::eval::{Estimator, Kernel};
use crate::labels;
use crate::scene::GridSpec;
use crate::semseg::SegConfig;
use crate::vae::VaeConfig;

pub const ENV_PREFIX: &str = "VOXDIFF_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapConfig {
    /// Voxel size of the aggregated map in meters.
    pub resolution: f64,
    pub num_classes: u8,
    /// Drop points of moving classes before aggregation.
    pub remove_moving: bool,
    /// Crop at every `every`-th scan pose.
    pub every: usize,
    pub crop_min: [f64; 3],
    pub crop_dims: [usize; 3],
    pub crop_resolution: f64,
}

impl Default for MapConfig {
    fn default() -> Self {
        let g = GridSpec::training_crop();
        Self {
            resolution: g.resolution(),
            num_classes: labels::NUM_CLASSES,
            remove_moving: true,
            every: 1,
            crop_min: g.min_corner(),
            crop_dims: g.dims(),
            crop_resolution: g.resolution(),
        }
    }
}

impl MapConfig {
    pub fn crop_grid(&self) -> Result<GridSpec> {
        GridSpec::from_dims(self.crop_min, self.crop_dims, self.crop_resolution)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LidarConfig {
    /// `64-beam` or `128-beam`.
    pub profile: String,
    pub origin: [f64; 3],
    /// Standard deviation of range noise in meters; 0 disables it.
    pub jitter_std: f64,
}

impl Default for LidarConfig {
    fn default() -> Self {
        Self { profile: "64-beam".into(), origin: [0.0; 3], jitter_std: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// `rbf_median`, `rbf` or `linear`.
    pub kernel: String,
    /// Bandwidth of the `rbf` kernel.
    pub bandwidth: f64,
    /// `unbiased` or `biased`.
    pub estimator: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { kernel: "rbf_median".into(), bandwidth: 1.0, estimator: "unbiased".into() }
    }
}

impl EvalConfig {
    pub fn kernel(&self) -> Result<Kernel> {
        match self.kernel.as_str() {
            "rbf_median" => Ok(Kernel::RbfMedian),
            "rbf" if self.bandwidth > 0.0 => Ok(Kernel::Rbf(self.bandwidth)),
            "linear" => Ok(Kernel::Linear),
            k => Err(Error::Config(format!("unknown kernel {k:?} or non-positive bandwidth"))),
        }
    }

    pub fn estimator(&self) -> Result<Estimator> {
        match self.estimator.as_str() {
            "unbiased" => Ok(Estimator::Unbiased),
            "biased" => Ok(Estimator::Biased),
            e => Err(Error::Config(format!("unknown estimator {e:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSection {
    pub sizes: Vec<usize>,
    pub forwards: usize,
    pub occupancy: f64,
    pub budget_mb: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self { sizes: vec![32, 64], forwards: 3, occupancy: 0.1, budget_mb: 2048 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub map: MapConfig,
    pub vae: VaeConfig,
    pub diffusion: DiffusionConfig,
    pub lidar: LidarConfig,
    pub semseg: SegConfig,
    pub eval: EvalConfig,
    pub bench: BenchSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run: RunSection { seed: 0 },
            map: MapConfig::default(),
            vae: VaeConfig::default(),
            diffusion: DiffusionConfig::default(),
            lidar: LidarConfig::default(),
            semseg: SegConfig::default(),
            eval: EvalConfig::default(),
            bench: BenchSection::default(),
        }
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(m) if !m.is_empty() => {
            for (k, x) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, x, out);
            }
        }
        leaf => {
            out.insert(prefix.to_string(), leaf.clone());
        }
    }
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Value {
    let mut root = Map::new();
    for (key, v) in flat {
        let parts: Vec<&str> = key.split('.').collect();
        let mut node = &mut root;
        for p in &parts[..parts.len() - 1] {
            node = node
                .entry(p.to_string())
                .or_insert_with(|| Value::Object(Map::new()))
                .as_object_mut()
                .expect("prefix of a leaf is an object");
        }
        node.insert(parts[parts.len() - 1].to_string(), v.clone());
    }
    Value::Object(root)
}

/// Parses `raw` as the JSON type of `current`. Strings are taken verbatim
/// and arrays may omit their brackets.
fn parse_value(key: &str, raw: &str, current: &Value) -> Result<Value> {
    let raw = raw.trim();
    let bad = |e: String| Error::Config(format!("{key}: cannot parse {raw:?}: {e}"));
    match current {
        Value::String(_) => Ok(Value::String(raw.trim_matches('"').to_string())),
        Value::Array(_) if !raw.starts_with('[') => serde_json::from_str(&format!("[{raw}]")).map_err(|e| bad(e.to_string())),
        Value::Null => Ok(serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))),
        _ => serde_json::from_str(raw).map_err(|e| bad(e.to_string())),
    }
}

/// Where an override came from, for diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layer {
    File,
    Env,
    Flag,
}

impl RunConfig {
    /// Dotted key to JSON value for every leaf.
    pub fn flatten(&self) -> BTreeMap<String, Value> {
        let mut out = BTreeMap::new();
        flatten("", &serde_json::to_value(self).expect("config serializes"), &mut out);
        out
    }

    /// Applies `(key, raw value)` overrides; unknown keys are rejected.
    /// Overrides of optional parameters are matched against their prefix,
    /// so `diffusion.weighting.gamma` stays valid for structured values.
    pub fn apply(&self, overrides: &[(String, String)], layer: Layer) -> Result<Self> {
        let mut flat = self.flatten();
        let known = RunConfig::default().flatten();
        for (key, raw) in overrides {
            let current = flat.get(key).or_else(|| known.get(key)).cloned().ok_or_else(|| {
                Error::Config(format!("unknown configuration key {key:?} ({layer:?})"))
            })?;
            let v = parse_value(key, raw, &current)?;
            flat.insert(key.clone(), v);
        }
        serde_json::from_value(unflatten(&flat)).map_err(|e| Error::Config(format!("{layer:?} override: {e}")))
    }

    /// `section.key = value` lines; `#` starts a comment.
    pub fn parse_file_text(text: &str) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("config line {}: expected key = value", n + 1)))?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(out)
    }

    /// `VOXDIFF_VAE__EPOCHS=3` becomes `vae.epochs = 3`.
    pub fn env_overrides(vars: impl IntoIterator<Item = (String, String)>) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = vars
            .into_iter()
            .filter_map(|(k, v)| {
                let rest = k.strip_prefix(ENV_PREFIX)?;
                rest.contains("__").then(|| (rest.to_ascii_lowercase().replace("__", "."), v))
            })
            .collect();
        out.sort();
        out
    }

    /// Defaults, then `file`, then environment, then flags.
    pub fn resolve(
        file: Option<&Path>,
        env: impl IntoIterator<Item = (String, String)>,
        flags: &[(String, String)],
    ) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            cfg = cfg.apply(&Self::parse_file_text(&text)?, Layer::File)?;
        }
        cfg = cfg.apply(&Self::env_overrides(env), Layer::Env)?;
        cfg = cfg.apply(flags, Layer::Flag)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.vae.validate()?;
        self.diffusion.validate()?;
        self.semseg.validate()?;
        self.eval.kernel()?;
        self.eval.estimator()?;
        self.map.crop_grid()?;
        if self.map.every == 0 {
            return Err(Error::Config("map.every must be positive".into()));
        }
        Ok(())
    }

    /// Canonical `key = value` text, sorted by key.
    pub fn to_text(&self) -> String {
        self.flatten().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// SHA-256 of [`RunConfig::to_text`].
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kv(k: &str, v: &str) -> (String, String) {
        (k.to_string(), v.to_string())
    }

    #[test]
    fn text_roundtrip_reproduces_config() {
        let c = RunConfig::default();
        let parsed = RunConfig::parse_file_text(&c.to_text()).unwrap();
        assert_eq!(c.apply(&parsed, Layer::File).unwrap(), c);
    }

    #[test]
    fn precedence_flag_env_file_default() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("run.cfg");
        fs::write(&f, "# comment\nvae.epochs = 3\nvae.lr = 0.01\nrun.seed = 5\n").unwrap();
        let env = vec![kv("VOXDIFF_VAE__EPOCHS", "4"), kv("VOXDIFF_DIFFUSION__WEIGHTING__GAMMA", "2.5"), kv("HOME", "/")];
        let c = RunConfig::resolve(Some(&f), env, &[kv("vae.epochs", "7")]).unwrap();
        assert_eq!(c.vae.epochs, 7);
        assert_eq!(c.vae.lr, 0.01);
        assert_eq!(c.run.seed, 5);
        assert_eq!(c.diffusion.weighting, crate::diffusion::LossWeighting::MinSnr { gamma: 2.5 });
        assert_eq!(c.semseg.lr, 0.24);
    }

    #[test]
    fn unknown_and_malformed_keys_rejected() {
        let c = RunConfig::default();
        assert!(c.apply(&[kv("vae.nope", "1")], Layer::Flag).is_err());
        assert!(c.apply(&[kv("vae.epochs", "many")], Layer::Flag).is_err());
        assert!(RunConfig::resolve(None, vec![kv("VOXDIFF_VAE__BOGUS", "1")], &[]).is_err());
        assert!(RunConfig::parse_file_text("no equals sign").is_err());
    }

    #[test]
    fn arrays_options_and_strings() {
        let c = RunConfig::default()
            .apply(
                &[
                    kv("vae.widths", "8,16,32,64"),
                    kv("vae.class_weights", "[1,2]"),
                    kv("lidar.profile", "128-beam"),
                    kv("diffusion.max_steps", "10"),
                ],
                Layer::Flag,
            )
            .unwrap();
        assert_eq!(c.vae.widths, [8, 16, 32, 64]);
        assert_eq!(c.vae.class_weights, Some(vec![1.0, 2.0]));
        assert_eq!(c.lidar.profile, "128-beam");
        assert_eq!(c.diffusion.max_steps, Some(10));
        let back = c.apply(&[kv("diffusion.max_steps", "null")], Layer::Flag).unwrap();
        assert_eq!(back.diffusion.max_steps, None);
    }

    #[test]
    fn shipped_toy_config_matches_presets() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.cfg");
        let c = RunConfig::resolve(Some(&path), Vec::new(), &[]).unwrap();
        assert_eq!(c.vae, VaeConfig::toy());
        assert_eq!(c.diffusion, DiffusionConfig::toy());
        assert_eq!(c.semseg, SegConfig::toy());
        let g = c.map.crop_grid().unwrap();
        assert_eq!((g.dims(), g.resolution()), ([64, 64, 16], crate::toy::TOY_RESOLUTION));
    }

    #[test]
    fn fingerprint_tracks_every_value() {
        let base = RunConfig::default();
        let fp = base.fingerprint();
        assert_eq!(fp, RunConfig::default().fingerprint());
        for (k, v) in base.flatten() {
            let changed = match &v {
                Value::Number(n) if n.is_u64() => (n.as_u64().unwrap() + 1).to_string(),
                Value::Number(n) => (n.as_f64().unwrap() * 0.5 + 0.125).to_string(),
                Value::Bool(b) => (!b).to_string(),
                Value::String(s) => format!("{s}x"),
                Value::Null => "1".to_string(),
                Value::Array(_) => continue,
                Value::Object(_) => unreachable!(),
            };
            let Ok(c) = base.apply(&[(k.clone(), changed)], Layer::Flag) else { continue };
            assert_ne!(c.fingerprint(), fp, "{k}");
        }
    }
}
