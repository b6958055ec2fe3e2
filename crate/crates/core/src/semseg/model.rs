//! Sparse encoder-decoder segmentation network over occupied voxels.

use std::path::Path;

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SegConfig;
use crate::error::{Error, Result};
use crate::eval::{iou, ConfusionMatrix};
use crate::labels;
use crate::nn::checkpoint::{Checkpoint, RngState};
use crate::nn::optim::Sgd;
use crate::nn::sparse::{child_offset, CoordSet, SparseConv, Table, Up2};
use crate::nn::{cancel, derive_seed, scalar, u32_tensor, InstanceNorm, Linear, ParamStore};
use crate::scene::{ClassId, VoxelCoord, VoxelScene};
use crate::vae::loss::{class_indices, level_cross_entropy};

const CHECKPOINT_KIND: &str = "semseg";
const INPUT_CHANNELS: usize = 4;

/// Anything that labels every occupied voxel of a scene.
pub trait VoxelClassifier {
    fn num_classes(&self) -> u8;
    /// One class per entry of `scene.coords()`.
    fn predict(&self, scene: &VoxelScene) -> Result<Vec<ClassId>>;
}

/// Conv followed by instance norm and SiLU.
struct Block {
    conv: SparseConv,
    norm: InstanceNorm,
}

impl Block {
    fn subm3(store: &mut ParamStore, name: &str, cin: usize, cout: usize) -> Result<Self> {
        Ok(Self { conv: SparseConv::subm3(store, name, cin, cout)?, norm: InstanceNorm::new(store, &format!("{name}.norm"), cout)? })
    }

    fn down2(store: &mut ParamStore, name: &str, cin: usize, cout: usize) -> Result<Self> {
        Ok(Self { conv: SparseConv::down2(store, name, cin, cout)?, norm: InstanceNorm::new(store, &format!("{name}.norm"), cout)? })
    }

    fn forward(&self, x: &Tensor, t: &Table) -> Result<Tensor> {
        Ok(self.norm.forward(&self.conv.forward(x, t)?)?.silu()?)
    }
}

struct UpBlock {
    up: Up2,
    norm: InstanceNorm,
    merge: Block,
}

/// Neighbor tables of one scene at every level.
pub struct SegPlan {
    input: Tensor,
    subm: Vec<Table>,
    down: Vec<Table>,
    /// Per fine level `l`, the `Up2` source row of each cell from level `l + 1`.
    up_rows: Vec<Tensor>,
    n: usize,
}

impl SegPlan {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }
}

pub struct Segmenter {
    cfg: SegConfig,
    store: ParamStore,
    stem: Block,
    res: Vec<Block>,
    down: Vec<Block>,
    up: Vec<UpBlock>,
    head: Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegEpoch {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub steps: usize,
    /// Predictions on the training scenes made during the epoch.
    pub train_confusion: ConfusionMatrix,
    /// End-of-epoch evaluation on the validation scenes, if given.
    pub val_confusion: Option<ConfusionMatrix>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegLog {
    pub epochs: Vec<SegEpoch>,
    pub steps: usize,
    pub cancelled: bool,
    /// Final evaluation on the validation scenes, or on the training scenes
    /// when none are given.
    pub final_confusion: ConfusionMatrix,
}

impl SegLog {
    pub fn final_miou(&self) -> Option<f64> {
        iou(&self.final_confusion).miou
    }
}

/// Confusion matrix for `num_classes`, ignoring moving classes on the
/// 19-class table.
pub fn new_confusion(num_classes: u8) -> ConfusionMatrix {
    if num_classes == labels::NUM_CLASSES {
        ConfusionMatrix::with_moving_ignored(num_classes)
    } else {
        ConfusionMatrix::new(num_classes)
    }
}

fn input_features(scene: &VoxelScene) -> Vec<f32> {
    let d = scene.grid().dims();
    let mut v = Vec::with_capacity(scene.len() * INPUT_CHANNELS);
    for c in scene.coords() {
        for a in 0..3 {
            v.push(((c[a] as f64 + 0.5) / d[a] as f64 - 0.5) as f32);
        }
        v.push(1.0);
    }
    v
}

fn argmax_rows(logits: &Tensor) -> Result<Vec<ClassId>> {
    let idx = logits.argmax(1)?.to_vec1::<u32>()?;
    Ok(idx.into_iter().map(|i| i as ClassId + 1).collect())
}

/// Mirrors a scene along x and/or y.
fn flip(scene: &VoxelScene, fx: bool, fy: bool) -> Result<VoxelScene> {
    let d = scene.grid().dims();
    let mut pairs: Vec<(VoxelCoord, ClassId)> = scene
        .iter()
        .map(|(c, l)| {
            let x = if fx { d[0] as u16 - 1 - c[0] } else { c[0] };
            let y = if fy { d[1] as u16 - 1 - c[1] } else { c[1] };
            ([x, y, c[2]], l)
        })
        .collect();
    pairs.sort_unstable();
    let (coords, labels) = pairs.into_iter().unzip();
    VoxelScene::new(scene.grid().clone(), scene.num_classes(), coords, labels)
}

impl Segmenter {
    pub fn new(cfg: SegConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(seed, DType::F32);
        let w = &cfg.widths;
        let stem = Block::subm3(&mut store, "seg.stem", INPUT_CHANNELS, w[0])?;
        let mut res = Vec::with_capacity(w.len());
        let mut down = Vec::with_capacity(w.len() - 1);
        res.push(Block::subm3(&mut store, "seg.res0", w[0], w[0])?);
        for l in 1..w.len() {
            down.push(Block::down2(&mut store, &format!("seg.down{l}"), w[l - 1], w[l])?);
            res.push(Block::subm3(&mut store, &format!("seg.res{l}"), w[l], w[l])?);
        }
        let mut up = Vec::with_capacity(w.len() - 1);
        for l in 0..w.len() - 1 {
            up.push(UpBlock {
                up: Up2::new(&mut store, &format!("seg.up{l}"), w[l + 1], w[l])?,
                norm: InstanceNorm::new(&mut store, &format!("seg.up{l}.norm"), w[l])?,
                merge: Block::subm3(&mut store, &format!("seg.merge{l}"), 2 * w[l], w[l])?,
            });
        }
        let head = Linear::new(&mut store, "seg.head", w[0], cfg.num_classes as usize)?;
        Ok(Self { cfg, store, stem, res, down, up, head })
    }

    pub fn config(&self) -> &SegConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn plan(&self, scene: &VoxelScene) -> Result<SegPlan> {
        if scene.is_empty() {
            return Err(Error::RejectedInput("cannot segment an empty scene".into()));
        }
        if scene.num_classes() != self.cfg.num_classes {
            return Err(Error::ShapeMismatch(format!(
                "scene has {} classes, model {}",
                scene.num_classes(),
                self.cfg.num_classes
            )));
        }
        let n = scene.len();
        let input = Tensor::from_vec(input_features(scene), (n, INPUT_CHANNELS), self.store.device())?;
        let mut sets = vec![CoordSet::new(scene.grid().dims(), scene.coords().to_vec())];
        for _ in 1..self.cfg.widths.len() {
            let p = sets.last().expect("non-empty").parents();
            sets.push(p);
        }
        let mut subm = Vec::with_capacity(sets.len());
        let mut down = Vec::with_capacity(sets.len() - 1);
        let mut up_rows = Vec::with_capacity(sets.len() - 1);
        for (l, s) in sets.iter().enumerate() {
            subm.push(Table::new(&s.subm3_table(), 27)?);
            if l + 1 < sets.len() {
                let coarse = &sets[l + 1];
                down.push(Table::new(&s.down2_table(coarse), 8)?);
                let rows: Vec<u32> = s
                    .parent_rows(coarse)
                    .iter()
                    .zip(s.coords())
                    .map(|(&p, &c)| p * 8 + child_offset(c) as u32)
                    .collect();
                up_rows.push(u32_tensor(&rows)?);
            }
        }
        Ok(SegPlan { input, subm, down, up_rows, n })
    }

    /// Per-voxel logits `(n, C)` and penultimate features `(n, widths[0])`.
    pub fn forward(&self, plan: &SegPlan) -> Result<(Tensor, Tensor)> {
        let mut x = self.stem.forward(&plan.input, &plan.subm[0])?;
        x = (&x + self.res[0].forward(&x, &plan.subm[0])?)?;
        let mut skips = vec![x.clone()];
        for l in 1..self.cfg.widths.len() {
            x = self.down[l - 1].forward(&x, &plan.down[l - 1])?;
            x = (&x + self.res[l].forward(&x, &plan.subm[l])?)?;
            skips.push(x.clone());
        }
        for l in (0..self.cfg.widths.len() - 1).rev() {
            let u = &self.up[l];
            let h = u.norm.forward(&u.up.forward(&x, &plan.up_rows[l])?)?.silu()?;
            x = u.merge.forward(&Tensor::cat(&[&h, &skips[l]], 1)?, &plan.subm[l])?;
        }
        Ok((self.head.forward(&x)?, x))
    }

    /// Mean-pooled penultimate features of a scene.
    pub fn features(&self, scene: &VoxelScene) -> Result<Vec<f64>> {
        let (_, f) = self.forward(&self.plan(scene)?)?;
        Ok(f.mean(0)?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
    }

    pub fn to_checkpoint(&self, epoch: u64, rng: Option<&ChaCha8Rng>) -> Result<Checkpoint> {
        Ok(Checkpoint {
            kind: CHECKPOINT_KIND.into(),
            config: serde_json::to_value(&self.cfg)?,
            epoch,
            rng: rng.map(RngState::capture),
            extra: serde_json::Value::Null,
            tensors: self.store.export()?,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != CHECKPOINT_KIND {
            return Err(Error::format(format!("expected a {CHECKPOINT_KIND} checkpoint, found {}", ck.kind)));
        }
        let cfg: SegConfig = serde_json::from_value(ck.config.clone())?;
        let mut model = Self::new(cfg, 0)?;
        let found: Vec<&str> = ck.tensors.iter().map(|t| t.name.as_str()).collect();
        if let Some(missing) = model.store.names().find(|n| !found.contains(n)) {
            return Err(Error::format(format!("checkpoint lacks parameter {missing}")));
        }
        model.store.import(&ck.tensors)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>, epoch: u64) -> Result<()> {
        self.to_checkpoint(epoch, None)?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

impl VoxelClassifier for Segmenter {
    fn num_classes(&self) -> u8 {
        self.cfg.num_classes
    }

    fn predict(&self, scene: &VoxelScene) -> Result<Vec<ClassId>> {
        let (logits, _) = self.forward(&self.plan(scene)?)?;
        argmax_rows(&logits)
    }
}

/// Accumulates the confusion of `model` over labeled scenes.
pub fn evaluate_segmenter<M: VoxelClassifier + ?Sized>(model: &M, scenes: &[VoxelScene]) -> Result<ConfusionMatrix> {
    let c = model.num_classes();
    let mut conf = new_confusion(c);
    for s in scenes {
        if s.num_classes() != c {
            return Err(Error::ShapeMismatch(format!("scene has {} classes, model {c}", s.num_classes())));
        }
        let pred = model.predict(s)?;
        if pred.len() != s.len() {
            return Err(Error::ShapeMismatch(format!("{} predictions for {} voxels", pred.len(), s.len())));
        }
        for (&g, p) in s.labels().iter().zip(pred) {
            conf.add(g, p)?;
        }
    }
    Ok(conf)
}

/// Trains a fresh segmenter with SGD, momentum and per-step cosine
/// annealing. Scenes are visited one at a time in a seeded order.
pub fn train_segmenter(train: &[VoxelScene], val: &[VoxelScene], cfg: &SegConfig, seed: u64) -> Result<(Segmenter, SegLog)> {
    if train.is_empty() {
        return Err(Error::RejectedInput("segmentation training set is empty".into()));
    }
    let model = Segmenter::new(cfg.clone(), derive_seed(seed, "semseg.init"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "semseg.train"));
    let plans: Vec<SegPlan> = if cfg.augment { Vec::new() } else { train.iter().map(|s| model.plan(s)).collect::<Result<_>>()? };
    let total = cfg.epochs * train.len();
    let total = cfg.max_steps.map_or(total, |m| m.min(total));
    let mut opt = Sgd::new(model.store.all_vars(), cfg.momentum).with_clip(cfg.clip_norm);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    let mut cancelled = false;
    'outer: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut conf = new_confusion(cfg.num_classes);
        let (mut loss_sum, mut n) = (0.0, 0);
        for &i in &order {
            if step >= total {
                break 'outer;
            }
            let lr = cfg.lr_at_step(step, total);
            let augmented;
            let (scene, plan) = if cfg.augment {
                let (fx, fy) = (rng.random_bool(0.5), rng.random_bool(0.5));
                augmented = flip(&train[i], fx, fy)?;
                let p = model.plan(&augmented)?;
                (&augmented, Some(p))
            } else {
                (&train[i], None)
            };
            let plan = plan.as_ref().unwrap_or_else(|| &plans[i]);
            let (logits, _) = model.forward(plan)?;
            let target = class_indices(scene.labels(), cfg.num_classes as usize)?;
            let loss = level_cross_entropy(&logits, &target, None)?;
            let value = scalar(&loss)?;
            if !value.is_finite() {
                return Err(Error::Diverged { context: format!("segmenter epoch {epoch} step {step}"), loss: value });
            }
            opt.step(&loss.backward()?, lr)?;
            for (&g, p) in scene.labels().iter().zip(argmax_rows(&logits.detach())?) {
                conf.add(g, p)?;
            }
            loss_sum += value;
            n += 1;
            step += 1;
            if cancel::requested() {
                cancelled = true;
                break;
            }
        }
        let val_confusion = if val.is_empty() { None } else { Some(evaluate_segmenter(&model, val)?) };
        log::info!("semseg epoch {epoch} loss {:.4} train mIoU {:?}", loss_sum / n.max(1) as f64, iou(&conf).miou);
        epochs.push(SegEpoch {
            epoch,
            lr: cfg.lr_at(epoch),
            loss: loss_sum / n.max(1) as f64,
            steps: n,
            train_confusion: conf,
            val_confusion,
        });
        if cancelled {
            break;
        }
    }
    let final_confusion = evaluate_segmenter(&model, if val.is_empty() { train } else { val })?;
    Ok((model, SegLog { epochs, steps: step, cancelled, final_confusion }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::{procedural_scene, toy_grid, NUM_TOY_CLASSES};

    struct Perfect;

    impl VoxelClassifier for Perfect {
        fn num_classes(&self) -> u8 {
            NUM_TOY_CLASSES
        }
        fn predict(&self, scene: &VoxelScene) -> Result<Vec<ClassId>> {
            Ok(scene.labels().to_vec())
        }
    }

    struct Constant(ClassId, u8);

    impl VoxelClassifier for Constant {
        fn num_classes(&self) -> u8 {
            self.1
        }
        fn predict(&self, scene: &VoxelScene) -> Result<Vec<ClassId>> {
            Ok(vec![self.0; scene.len()])
        }
    }

    fn scenes() -> Vec<VoxelScene> {
        (0..2).map(|s| procedural_scene(s, [32, 32, 8]).unwrap()).collect()
    }

    #[test]
    fn perfect_stub_gives_diagonal() {
        let conf = evaluate_segmenter(&Perfect, &scenes()).unwrap();
        for g in 1..=NUM_TOY_CLASSES {
            for p in 1..=NUM_TOY_CLASSES {
                if g != p {
                    assert_eq!(conf.get(g, p), 0);
                }
            }
        }
        assert_eq!(conf.total() as usize, scenes().iter().map(|s| s.len()).sum::<usize>());
    }

    #[test]
    fn constant_stub_fills_one_column() {
        let conf = evaluate_segmenter(&Constant(2, NUM_TOY_CLASSES), &scenes()).unwrap();
        for g in 1..=NUM_TOY_CLASSES {
            for p in [1, 3, 4] {
                assert_eq!(conf.get(g, p), 0);
            }
        }
        assert!(evaluate_segmenter(&Constant(2, 19), &scenes()).is_err());
    }

    #[test]
    fn hand_built_three_voxels() {
        let grid = toy_grid([4, 4, 4]);
        let scene = VoxelScene::new(grid, 3, vec![[0, 0, 0], [1, 0, 0], [2, 0, 0]], vec![1, 2, 2]).unwrap();
        struct Fixed;
        impl VoxelClassifier for Fixed {
            fn num_classes(&self) -> u8 {
                3
            }
            fn predict(&self, _: &VoxelScene) -> Result<Vec<ClassId>> {
                Ok(vec![1, 3, 2])
            }
        }
        let conf = evaluate_segmenter(&Fixed, &[scene]).unwrap();
        assert_eq!(conf, ConfusionMatrix::from_rows(&[vec![1, 0, 0], vec![0, 1, 1], vec![0, 0, 0]]).unwrap());
    }

    #[test]
    fn moving_classes_ignored_on_full_table() {
        assert_eq!(new_confusion(19).ignored().len(), 5);
        assert!(new_confusion(4).ignored().is_empty());
    }

    #[test]
    fn shapes_and_checkpoint_roundtrip() {
        let cfg = SegConfig { widths: vec![4, 8], ..SegConfig::toy() };
        let m = Segmenter::new(cfg, 1).unwrap();
        let s = &scenes()[0];
        let (logits, f) = m.forward(&m.plan(s).unwrap()).unwrap();
        assert_eq!(logits.dims(), [s.len(), NUM_TOY_CLASSES as usize]);
        assert_eq!(f.dims(), [s.len(), 4]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seg.ckpt");
        m.save(&path, 0).unwrap();
        let back = Segmenter::load(&path).unwrap();
        assert_eq!(back.predict(s).unwrap(), m.predict(s).unwrap());
        assert_eq!(back.features(s).unwrap(), m.features(s).unwrap());
    }

    #[test]
    fn flip_preserves_labels() {
        let s = &scenes()[0];
        let f = flip(&flip(s, true, true).unwrap(), true, true).unwrap();
        assert_eq!(&f, s);
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = SegConfig { widths: vec![4, 8], epochs: 1, max_steps: Some(2), ..SegConfig::toy() };
        let data = scenes();
        let (a, la) = train_segmenter(&data, &[], &cfg, 5).unwrap();
        let (b, lb) = train_segmenter(&data, &[], &cfg, 5).unwrap();
        assert_eq!(la, lb);
        assert_eq!(a.store().checksum("").unwrap(), b.store().checksum("").unwrap());
        assert_eq!(la.steps, 2);
        assert!(train_segmenter(&[], &[], &cfg, 5).is_err());
    }
}
