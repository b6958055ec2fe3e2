//! Decoder feature-memory benchmark with and without pruning.
//!
//! The pruned variant keeps the ground-truth occupied cells of a synthetic
//! scene at every level; the unpruned variant keeps every child. Memory is
//! counted as `cells x channels x 4` bytes per upsampling stage.

use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::nn::derive_seed;
use crate::scene::{downsample_scene, ClassId, DenseLatent, HierarchyTargets, VoxelCoord, VoxelScene};
use crate::toy::toy_grid;
use crate::vae::{Gating, LayerStats, Vae, VaeConfig};

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub vae: VaeConfig,
    /// Forward passes averaged per variant.
    pub forwards: usize,
    /// Fraction of occupied cells in the benchmark scene.
    pub occupancy: f64,
    /// Estimated peak bytes above which a variant is not run.
    pub budget_bytes: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { vae: VaeConfig::toy(), forwards: 3, occupancy: 0.1, budget_bytes: 2 << 30, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Outcome {
    Measured { layers: Vec<LayerStats>, mean_ms: f64, estimated_peak_bytes: usize },
    Exceeded { layers: Vec<LayerStats>, estimated_peak_bytes: usize },
}

impl Outcome {
    pub fn layers(&self) -> &[LayerStats] {
        match self {
            Outcome::Measured { layers, .. } | Outcome::Exceeded { layers, .. } => layers,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub size: usize,
    pub occupied: usize,
    pub pruned: Outcome,
    pub unpruned: Outcome,
}

impl BenchRow {
    /// Unpruned over pruned bytes at full resolution.
    pub fn reduction(&self) -> Option<f64> {
        let last = |o: &Outcome| o.layers().last().map(|l| l.bytes);
        match (last(&self.pruned), last(&self.unpruned)) {
            (Some(p), Some(u)) if p > 0 => Some(u as f64 / p as f64),
            _ => None,
        }
    }
}

/// A `size^3` toy scene filled bottom-up, layer by layer, until
/// `floor(occupancy * size^3)` cells are occupied; labels cycle with height.
pub fn slab_scene(size: usize, occupancy: f64, num_classes: u8) -> Result<VoxelScene> {
    if !(0.0..=1.0).contains(&occupancy) || size == 0 || num_classes == 0 {
        return Err(Error::Config("slab scene needs a positive size and occupancy in [0, 1]".into()));
    }
    let n = crate::semseg::floor_count(size * size * size, occupancy);
    let mut coords: Vec<VoxelCoord> = Vec::with_capacity(n);
    'fill: for k in 0..size {
        for i in 0..size {
            for j in 0..size {
                if coords.len() == n {
                    break 'fill;
                }
                coords.push([i as u16, j as u16, k as u16]);
            }
        }
    }
    coords.sort_unstable();
    let labels = coords.iter().map(|c| (c[2] as usize % num_classes as usize) as ClassId + 1).collect();
    VoxelScene::new(toy_grid([size; 3]), num_classes, coords, labels)
}

/// Per-stage candidate counts: every child when unpruned, children of the
/// occupied parents otherwise.
fn planned_layers(vae: &Vae, targets: Option<&HierarchyTargets>) -> Vec<LayerStats> {
    let cfg = vae.config();
    let grid = vae.grid();
    (1..=cfg.levels)
        .map(|k| {
            let level = cfg.levels - k;
            let dims = grid.downsampled_dims(level);
            let cells = match targets {
                None => dims.iter().product(),
                Some(_) if k == 1 => dims.iter().product(),
                Some(t) => {
                    let parents = &t.level(level + 1).coords;
                    parents
                        .iter()
                        .map(|p| {
                            (0..8)
                                .filter(|o| {
                                    let c = [2 * p[0] as usize + (o >> 2), 2 * p[1] as usize + ((o >> 1) & 1), 2 * p[2] as usize + (o & 1)];
                                    c[0] < dims[0] && c[1] < dims[1] && c[2] < dims[2]
                                })
                                .count()
                        })
                        .sum()
                }
            };
            let channels = cfg.channels(level);
            LayerStats { level, cells, channels, bytes: cells * channels * 4 }
        })
        .collect()
}

/// Rough peak of one stage: the 8-way upsampled parents, the 27-tap gather
/// and a few candidate-sized activations.
fn peak_bytes(layers: &[LayerStats]) -> usize {
    layers.iter().map(|l| l.cells * l.channels * 4 * (8 + 27 + 4)).max().unwrap_or(0)
}

fn run_variant(vae: &Vae, latent: &DenseLatent, gating: Gating<'_>, planned: Vec<LayerStats>, cfg: &BenchConfig) -> Result<Outcome> {
    let estimated_peak_bytes = peak_bytes(&planned);
    if estimated_peak_bytes > cfg.budget_bytes {
        return Ok(Outcome::Exceeded { layers: planned, estimated_peak_bytes });
    }
    let mut layers = Vec::new();
    let start = Instant::now();
    for _ in 0..cfg.forwards.max(1) {
        layers = vae.decode_with(latent, gating)?.stats;
    }
    let mean_ms = start.elapsed().as_secs_f64() * 1e3 / cfg.forwards.max(1) as f64;
    Ok(Outcome::Measured { layers, mean_ms, estimated_peak_bytes })
}

pub fn bench_pruning(sizes: &[usize], cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let scene = slab_scene(size, cfg.occupancy, cfg.vae.num_classes)?;
        let vae = Vae::new(cfg.vae.clone(), scene.grid().clone(), derive_seed(cfg.seed, "bench.vae"))?;
        let targets = downsample_scene(&scene, cfg.vae.levels)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "bench.latent"));
        let dims = vae.latent_dims();
        let d = cfg.vae.latent_dim;
        let values = (0..dims.iter().product::<usize>() * d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let latent = DenseLatent::from_values(dims, d, values)?;
        let pruned = run_variant(&vae, &latent, Gating::Teacher(&targets), planned_layers(&vae, Some(&targets)), cfg)?;
        let unpruned = run_variant(&vae, &latent, Gating::Unpruned, planned_layers(&vae, None), cfg)?;
        rows.push(BenchRow { size, occupied: scene.len(), pruned, unpruned });
    }
    Ok(rows)
}

fn mb(bytes: usize) -> f64 {
    bytes as f64 / (1024.0 * 1024.0)
}

/// CSV with one line per size, variant and stage.
pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("size,variant,level,cells,channels,bytes,mean_ms,status\n");
    for r in rows {
        for (name, o) in [("pruned", &r.pruned), ("unpruned", &r.unpruned)] {
            let (ms, status) = match o {
                Outcome::Measured { mean_ms, .. } => (format!("{mean_ms:.3}"), "measured"),
                Outcome::Exceeded { .. } => ("n/a".to_string(), "exceeded"),
            };
            for l in o.layers() {
                let _ = writeln!(out, "{},{name},{},{},{},{},{ms},{status}", r.size, l.level, l.cells, l.channels, l.bytes);
            }
        }
    }
    out
}

/// Side-by-side text table in MB per stage.
pub fn bench_text(rows: &[BenchRow]) -> String {
    let mut out = String::new();
    for r in rows {
        let _ = writeln!(out, "scene {0}x{0}x{0}, {1} occupied cells", r.size, r.occupied);
        let _ = writeln!(out, "{:>6} {:>14} {:>14}", "level", "pruned MB", "unpruned MB");
        for (p, u) in r.pruned.layers().iter().zip(r.unpruned.layers()) {
            let _ = writeln!(out, "{:>6} {:>14.3} {:>14.3}", p.level, mb(p.bytes), mb(u.bytes));
        }
        let time = |o: &Outcome| match o {
            Outcome::Measured { mean_ms, .. } => format!("{mean_ms:.1} ms"),
            Outcome::Exceeded { estimated_peak_bytes, .. } => format!("exceeded ({:.0} MB est.)", mb(*estimated_peak_bytes)),
        };
        let _ = writeln!(out, "{:>6} {:>14} {:>14}", "time", time(&r.pruned), time(&r.unpruned));
        if let Some(x) = r.reduction() {
            let _ = writeln!(out, "full-resolution reduction {x:.1}x");
        }
        out.push('\n');
    }
    out
}
