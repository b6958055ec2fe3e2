//! Realism and segmentation metrics: kernel MMD, IoU from confusion
//! matrices, class distributions and per-class gap tables.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels;
use crate::scene::{ClassId, VoxelScene};

/// `n` feature vectors of a common dimension, one per scene.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    dim: usize,
    data: Vec<f64>,
}

impl FeatureSet {
    pub fn new(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::ShapeMismatch("feature vectors differ in length".into()));
        }
        Self::from_flat(dim, rows.concat())
    }

    pub fn from_flat(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 && !data.is_empty() || dim > 0 && data.len() % dim != 0 {
            return Err(Error::ShapeMismatch(format!("{} values do not split into rows of {dim}", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::RejectedInput("non-finite feature".into()));
        }
        Ok(Self { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Kernel {
    /// Gaussian `exp(-|x-y|^2 / (2 s^2))` with `s` the median pairwise
    /// distance over both sets.
    #[default]
    RbfMedian,
    /// Gaussian with a fixed bandwidth `s`.
    Rbf(f64),
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Estimator {
    #[default]
    Unbiased,
    Biased,
}

fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

fn median_distance(a: &FeatureSet, b: &FeatureSet) -> f64 {
    let rows: Vec<&[f64]> = (0..a.len()).map(|i| a.row(i)).chain((0..b.len()).map(|i| b.row(i))).collect();
    let mut d = Vec::with_capacity(rows.len() * rows.len().saturating_sub(1) / 2);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            d.push(sq_dist(rows[i], rows[j]).sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let m = d.len();
    let med = if m % 2 == 1 { d[m / 2] } else { 0.5 * (d[m / 2 - 1] + d[m / 2]) };
    if med > 0.0 {
        med
    } else {
        1.0
    }
}

/// Squared maximum mean discrepancy. The unbiased estimator can be slightly
/// negative; see [`mmd`] for the clamped reporting value.
pub fn mmd_squared(a: &FeatureSet, b: &FeatureSet, kernel: Kernel, estimator: Estimator) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::RejectedInput("MMD needs two non-empty feature sets".into()));
    }
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch(format!("feature dims {} vs {}", a.dim(), b.dim())));
    }
    if estimator == Estimator::Unbiased && (a.len() < 2 || b.len() < 2) {
        return Err(Error::RejectedInput("unbiased MMD needs at least two samples per set".into()));
    }
    let k: Box<dyn Fn(&[f64], &[f64]) -> f64> = match kernel {
        Kernel::Linear => Box::new(dot),
        Kernel::Rbf(s) => Box::new(move |x, y| (-sq_dist(x, y) / (2.0 * s * s)).exp()),
        Kernel::RbfMedian => {
            let s = median_distance(a, b);
            Box::new(move |x, y| (-sq_dist(x, y) / (2.0 * s * s)).exp())
        }
    };
    let within = |s: &FeatureSet| {
        let n = s.len();
        let mut sum = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j || estimator == Estimator::Biased {
                    sum += k(s.row(i), s.row(j));
                }
            }
        }
        let pairs = match estimator {
            Estimator::Biased => n * n,
            Estimator::Unbiased => n * (n - 1),
        };
        sum / pairs as f64
    };
    let mut cross = 0.0;
    for i in 0..a.len() {
        for j in 0..b.len() {
            cross += k(a.row(i), b.row(j));
        }
    }
    cross /= (a.len() * b.len()) as f64;
    Ok(within(a) + within(b) - 2.0 * cross)
}

/// Squared MMD clamped at zero.
pub fn mmd(a: &FeatureSet, b: &FeatureSet, kernel: Kernel, estimator: Estimator) -> Result<f64> {
    Ok(mmd_squared(a, b, kernel, estimator)?.max(0.0))
}

/// `C x C` counts, rows ground truth and columns prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_classes: u8,
    counts: Vec<u64>,
    ignored: BTreeSet<ClassId>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: u8) -> Self {
        let c = num_classes as usize;
        Self { num_classes, counts: vec![0; c * c], ignored: BTreeSet::new() }
    }

    /// Confusion matrix over the 19-class table with moving classes ignored.
    pub fn with_moving_ignored(num_classes: u8) -> Self {
        Self::new(num_classes).with_ignored(labels::MOVING_CLASSES.into_iter().filter(|&c| c <= num_classes))
    }

    pub fn with_ignored(mut self, ignored: impl IntoIterator<Item = ClassId>) -> Self {
        self.ignored.extend(ignored);
        self
    }

    /// Builds from nested rows; `rows[g][p]` counts class `g+1` predicted as `p+1`.
    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let c = rows.len();
        if c == 0 || c > u8::MAX as usize || rows.iter().any(|r| r.len() != c) {
            return Err(Error::ShapeMismatch("confusion rows must form a non-empty square".into()));
        }
        Ok(Self { num_classes: c as u8, counts: rows.concat(), ignored: BTreeSet::new() })
    }

    pub fn num_classes(&self) -> u8 {
        self.num_classes
    }

    pub fn ignored(&self) -> &BTreeSet<ClassId> {
        &self.ignored
    }

    pub fn get(&self, gt: ClassId, pred: ClassId) -> u64 {
        self.counts[self.index(gt, pred)]
    }

    pub fn add(&mut self, gt: ClassId, pred: ClassId) -> Result<()> {
        let n = self.num_classes;
        if !(1..=n).contains(&gt) || !(1..=n).contains(&pred) {
            return Err(Error::RejectedInput(format!("class pair ({gt}, {pred}) outside 1..={n}")));
        }
        let i = self.index(gt, pred);
        self.counts[i] += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::ShapeMismatch("confusion matrices differ in class count".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.ignored.extend(other.ignored.iter().copied());
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    fn index(&self, gt: ClassId, pred: ClassId) -> usize {
        (gt as usize - 1) * self.num_classes as usize + pred as usize - 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassIou {
    pub class: ClassId,
    /// `None` when the class never occurs in ground truth or prediction.
    pub iou: Option<f64>,
    pub ignored: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    pub per_class: Vec<ClassIou>,
    /// Mean over evaluated, non-ignored classes; `None` if there are none.
    pub miou: Option<f64>,
}

impl IouReport {
    pub fn class_map(&self) -> BTreeMap<ClassId, f64> {
        self.per_class.iter().filter(|c| !c.ignored).filter_map(|c| c.iou.map(|v| (c.class, v))).collect()
    }

    /// CSV with header `class,name,iou` and IoU in percent; the last row is
    /// the mean.
    pub fn to_csv(&self) -> String {
        let full_table = self.per_class.len() == labels::NUM_CLASSES as usize;
        let mut out = String::from("class,name,iou\n");
        for c in &self.per_class {
            let v = match (c.ignored, c.iou) {
                (true, _) => "ignored".to_string(),
                (false, None) => "n/a".to_string(),
                (false, Some(v)) => format!("{:.2}", 100.0 * v),
            };
            let name = if full_table { labels::class_name(c.class).unwrap_or("-") } else { "-" };
            let _ = writeln!(out, "{},{name},{v}", c.class);
        }
        let mean = self.miou.map_or("n/a".into(), |m| format!("{:.2}", 100.0 * m));
        let _ = writeln!(out, "mean,mIoU,{mean}");
        out
    }
}

/// Per-class `TP / (TP + FP + FN)` and their mean over evaluated,
/// non-ignored classes.
pub fn iou(conf: &ConfusionMatrix) -> IouReport {
    let n = conf.num_classes;
    let mut per_class = Vec::with_capacity(n as usize);
    let mut evaluated = Vec::new();
    for c in 1..=n {
        let tp = conf.get(c, c);
        let fn_: u64 = (1..=n).filter(|&p| p != c).map(|p| conf.get(c, p)).sum();
        let fp: u64 = (1..=n).filter(|&g| g != c).map(|g| conf.get(g, c)).sum();
        let union = tp + fp + fn_;
        let value = (union > 0).then(|| tp as f64 / union as f64);
        let ignored = conf.ignored.contains(&c);
        if let (Some(v), false) = (value, ignored) {
            evaluated.push(v);
        }
        per_class.push(ClassIou { class: c, iou: value, ignored });
    }
    let miou = (!evaluated.is_empty()).then(|| evaluated.iter().sum::<f64>() / evaluated.len() as f64);
    IouReport { per_class, miou }
}

/// Fraction of occupied voxels per class; index `c - 1` holds class `c`.
pub fn class_distribution(scenes: &[VoxelScene]) -> Result<Vec<f64>> {
    let first = scenes.first().ok_or_else(|| Error::RejectedInput("no scenes".into()))?;
    let c = first.num_classes();
    let mut counts = vec![0u64; c as usize];
    for s in scenes {
        if s.num_classes() != c {
            return Err(Error::ShapeMismatch("scenes disagree on class count".into()));
        }
        for &l in s.labels() {
            counts[l as usize - 1] += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::RejectedInput("scenes hold no voxels".into()));
    }
    Ok(counts.iter().map(|&n| n as f64 / total as f64).collect())
}

/// Signed per-class differences `synth - real`.
pub fn gap_table(real: &BTreeMap<ClassId, f64>, synth: &BTreeMap<ClassId, f64>) -> Result<BTreeMap<ClassId, f64>> {
    if !real.keys().eq(synth.keys()) {
        return Err(Error::ShapeMismatch("real and synthetic IoU cover different classes".into()));
    }
    Ok(real.iter().map(|(&c, &r)| (c, synth[&c] - r)).collect())
}

/// CSV rows `class,name,real,synthetic,gap`.
pub fn gap_csv(real: &BTreeMap<ClassId, f64>, synth: &BTreeMap<ClassId, f64>) -> Result<String> {
    let gap = gap_table(real, synth)?;
    let mut out = String::from("class,name,real,synthetic,gap\n");
    for (c, g) in &gap {
        let _ = writeln!(
            out,
            "{c},{},{:.2},{:.2},{:+.2}",
            labels::class_name(*c).unwrap_or("-"),
            real[c],
            synth[c],
            g
        );
    }
    Ok(out)
}
