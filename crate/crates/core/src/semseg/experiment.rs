//! Grids of mixing cells, each trained and evaluated independently.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::mix::{mix_datasets, MixSpec, Origin};
use super::model::train_segmenter;
use super::SegConfig;
use crate::error::{Error, Result};
use crate::eval::{iou, ConfusionMatrix};
use crate::labels;
use crate::nn::derive_seed;
use crate::scene::io::{list_scenes, load_scene};
use crate::scene::VoxelScene;

/// A named collection of scenes loaded on demand.
pub trait ScenePool {
    fn ids(&self) -> Result<Vec<String>>;
    fn load(&self, id: &str) -> Result<VoxelScene>;
}

impl ScenePool for BTreeMap<String, VoxelScene> {
    fn ids(&self) -> Result<Vec<String>> {
        Ok(self.keys().cloned().collect())
    }

    fn load(&self, id: &str) -> Result<VoxelScene> {
        self.get(id).cloned().ok_or_else(|| Error::NotFound(format!("scene {id}")))
    }
}

/// Directory of `.vsc` scene files keyed by file stem.
#[derive(Debug, Clone)]
pub struct SceneDir(pub PathBuf);

impl ScenePool for SceneDir {
    fn ids(&self) -> Result<Vec<String>> {
        Ok(list_scenes(&self.0)?.into_iter().map(|(id, _)| id).collect())
    }

    fn load(&self, id: &str) -> Result<VoxelScene> {
        load_scene(self.0.join(format!("{id}.{}", crate::scene::io::EXTENSION)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentCell {
    pub id: String,
    pub spec: MixSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRow {
    pub cell: String,
    pub source: String,
    pub mix: String,
    pub seed: u64,
    pub real: usize,
    pub synthetic: usize,
    pub confusion: Option<ConfusionMatrix>,
    pub error: Option<String>,
}

impl ExperimentRow {
    /// Mean IoU derived from the stored confusion matrix.
    pub fn miou(&self) -> Option<f64> {
        self.confusion.as_ref().and_then(|c| iou(c).miou)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: String,
    pub rows: Vec<ExperimentRow>,
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |v| format!("{:.2}", 100.0 * v))
}

impl ExperimentReport {
    /// One line per cell with mIoU and per-class IoU in percent.
    pub fn to_csv(&self) -> String {
        let classes = self.rows.iter().find_map(|r| r.confusion.as_ref().map(|c| c.num_classes())).unwrap_or(0);
        let mut out = String::from("cell,source,mix,seed,real,synthetic,miou");
        for c in 1..=classes {
            let _ = write!(out, ",{}", labels::class_name(c).filter(|_| classes == labels::NUM_CLASSES).unwrap_or(&c.to_string()));
        }
        out.push_str(",status\n");
        for r in &self.rows {
            let _ = write!(out, "{},{},{},{},{},{},{}", r.cell, r.source, r.mix, r.seed, r.real, r.synthetic, pct(r.miou()));
            let per_class = r.confusion.as_ref().map(|c| iou(c).per_class);
            for c in 0..classes as usize {
                let v = per_class.as_ref().and_then(|p| p.get(c)).and_then(|x| if x.ignored { None } else { x.iou });
                let _ = write!(out, ",{}", pct(v));
            }
            let status = r.error.as_deref().map_or("ok".to_string(), |e| format!("error: {}", e.replace([',', '\n'], ";")));
            let _ = writeln!(out, ",{status}");
        }
        out
    }

    /// mIoU table with one row per synthetic source and one column per mix.
    pub fn to_table(&self) -> String {
        let mut mixes: Vec<&str> = Vec::new();
        let mut sources: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !mixes.contains(&r.mix.as_str()) {
                mixes.push(&r.mix);
            }
            if !sources.contains(&r.source.as_str()) {
                sources.push(&r.source);
            }
        }
        let mut out = format!("{}\nsource", self.experiment);
        for m in &mixes {
            let _ = write!(out, "\t{m}");
        }
        out.push('\n');
        for s in &sources {
            out.push_str(s);
            for m in &mixes {
                let cell = self.rows.iter().find(|r| r.source == *s && r.mix == *m);
                let v = match cell {
                    Some(r) if r.error.is_some() => "failed".to_string(),
                    Some(r) => pct(r.miou()),
                    None => "-".into(),
                };
                let _ = write!(out, "\t{v}");
            }
            out.push('\n');
        }
        out
    }
}

fn run_cell(
    cell: &ExperimentCell,
    seed: u64,
    real: &dyn ScenePool,
    synthetic: &BTreeMap<String, &dyn ScenePool>,
    val: &[VoxelScene],
    cfg: &SegConfig,
) -> Result<(usize, usize, ConfusionMatrix)> {
    let pool = synthetic
        .get(&cell.spec.source)
        .ok_or_else(|| Error::NotFound(format!("synthetic source {}", cell.spec.source)))?;
    let set = mix_datasets(&real.ids()?, &pool.ids()?, &cell.spec, seed)?;
    let scenes: Vec<VoxelScene> = set
        .entries
        .iter()
        .map(|e| match e.origin {
            Origin::Real => real.load(&e.id),
            Origin::Synthetic => pool.load(&e.id),
        })
        .collect::<Result<_>>()?;
    let (_, log) = train_segmenter(&scenes, val, cfg, seed)?;
    Ok((set.real, set.synthetic, log.final_confusion))
}

/// Trains one segmenter per cell with the seed `hash(experiment, cell)`.
/// A failing cell is recorded in its row and the grid continues.
pub fn run_experiment(
    experiment: &str,
    cells: &[ExperimentCell],
    real: &dyn ScenePool,
    synthetic: &BTreeMap<String, &dyn ScenePool>,
    val: &[VoxelScene],
    cfg: &SegConfig,
) -> Result<ExperimentReport> {
    let mut seen = std::collections::BTreeSet::new();
    if let Some(dup) = cells.iter().find(|c| !seen.insert(c.id.as_str())) {
        return Err(Error::Config(format!("duplicate cell id {}", dup.id)));
    }
    let mut rows = Vec::with_capacity(cells.len());
    for cell in cells {
        let seed = derive_seed(0, &format!("{experiment}/{}", cell.id));
        let mut row = ExperimentRow {
            cell: cell.id.clone(),
            source: cell.spec.source.clone(),
            mix: cell.spec.label(),
            seed,
            real: 0,
            synthetic: 0,
            confusion: None,
            error: None,
        };
        match run_cell(cell, seed, real, synthetic, val, cfg) {
            Ok((r, s, conf)) => {
                row.real = r;
                row.synthetic = s;
                row.confusion = Some(conf);
            }
            Err(e) => {
                log::warn!("cell {} failed: {e}", cell.id);
                row.error = Some(e.to_string());
            }
        }
        rows.push(row);
    }
    Ok(ExperimentReport { experiment: experiment.to_string(), rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::procedural_scene;

    fn pool(prefix: &str, n: u64, offset: u64) -> BTreeMap<String, VoxelScene> {
        (0..n).map(|i| (format!("{prefix}{i}"), procedural_scene(offset + i, [16, 16, 8]).unwrap())).collect()
    }

    fn cfg() -> SegConfig {
        SegConfig { widths: vec![4, 8], epochs: 1, ..SegConfig::toy() }
    }

    #[test]
    fn cells_are_independent_and_reproducible() {
        let real = pool("r", 4, 0);
        let synth = pool("s", 4, 100);
        let sources: BTreeMap<String, &dyn ScenePool> = [("gen".to_string(), &synth as &dyn ScenePool)].into();
        let a = ExperimentCell { id: "a".into(), spec: MixSpec::fill(0.5, "gen") };
        let b = ExperimentCell { id: "b".into(), spec: MixSpec::fill(1.0, "gen") };
        let bad = ExperimentCell { id: "c".into(), spec: MixSpec::fill(0.5, "missing") };
        let fwd = run_experiment("e", &[a.clone(), b.clone(), bad.clone()], &real, &sources, &[], &cfg()).unwrap();
        let rev = run_experiment("e", &[bad, b, a.clone()], &real, &sources, &[], &cfg()).unwrap();
        assert_eq!(fwd.rows[0], rev.rows[2]);
        assert_eq!(fwd.rows[1], rev.rows[1]);
        assert!(fwd.rows[2].error.is_some());
        assert_eq!((fwd.rows[0].real, fwd.rows[0].synthetic), (2, 2));
        assert!(fwd.to_csv().starts_with("cell,source,mix,seed,real,synthetic,miou,1,2,3,4,status\n"));
        let one = run_experiment("e", &[a], &real, &sources, &[], &cfg()).unwrap();
        assert_eq!(one.rows.len(), 1);
        assert_eq!(one.to_csv().lines().count(), 2);
        assert!(fwd.to_table().contains("failed"));
    }
}
