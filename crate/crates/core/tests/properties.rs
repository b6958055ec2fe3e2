use std::collections::BTreeSet;

use candle_core::{Device, Tensor};
use proptest::prelude::*;
use voxdiff::diffusion::{corrupt, eps_from_v, make_schedule, v_target, z0_from_v};
use voxdiff::eval::{iou, mmd, mmd_squared, ConfusionMatrix, Estimator, FeatureSet, Kernel};
use voxdiff::lidar::{default_sensor, simulate};
use voxdiff::map::{aggregate, auto_map_grid, crop_at_pose, PosedScan, RigidTransform};
use voxdiff::pipeline::{Layer, RunConfig};
use voxdiff::scene::io::{decode_scene, encode_scene};
use voxdiff::scene::{
    downsample_scene, pack_dense, unpack_sparse, voxelize, ClassId, OccupancyGrid, SparseLatent, VoxelCoord, VoxelScene,
};
use voxdiff::semseg::{mix_datasets, MixSpec, Origin};
use voxdiff::toy::toy_grid;
use voxdiff::vae::loss::{bce, dice, latent_loss};

const C: u8 = 5;

fn scene_strategy(max_dim: usize) -> impl Strategy<Value = VoxelScene> {
    (1..=max_dim, 1..=max_dim, 1..=max_dim)
        .prop_flat_map(|(a, b, c)| {
            let n = a * b * c;
            (Just([a, b, c]), prop::collection::vec(prop::option::weighted(0.3, 1..=C), n))
        })
        .prop_map(|(dims, cells)| {
            let mut coords = Vec::new();
            let mut labels = Vec::new();
            for (idx, l) in cells.into_iter().enumerate() {
                if let Some(l) = l {
                    let (i, rest) = (idx / (dims[1] * dims[2]), idx % (dims[1] * dims[2]));
                    coords.push([i as u16, (rest / dims[2]) as u16, (rest % dims[2]) as u16]);
                    labels.push(l);
                }
            }
            VoxelScene::new(toy_grid(dims), C, coords, labels).unwrap()
        })
}

fn children(c: VoxelCoord, dims: [usize; 3]) -> impl Iterator<Item = VoxelCoord> {
    (0..8u16).map(move |o| [2 * c[0] + (o >> 2), 2 * c[1] + ((o >> 1) & 1), 2 * c[2] + (o & 1)]).filter(move |x| {
        (0..3).all(|a| (x[a] as usize) < dims[a])
    })
}

fn tensor(v: &[f64]) -> Tensor {
    Tensor::from_slice(v, v.len(), &Device::Cpu).unwrap()
}

fn values(t: &Tensor) -> Vec<f64> {
    t.to_vec1::<f64>().unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn hierarchy_masks_are_or_of_children_and_level0_is_the_scene(scene in scene_strategy(12)) {
        let max = scene.grid().dims().into_iter().max().unwrap();
        let levels = (usize::BITS - (max - 1).leading_zeros()) as usize;
        prop_assume!(levels >= 1);
        let t = downsample_scene(&scene, levels).unwrap();
        prop_assert_eq!(&t.level(0).coords, &scene.coords().to_vec());
        let mut a = t.level(0).labels.clone();
        let mut b = scene.labels().to_vec();
        a.sort_unstable();
        b.sort_unstable();
        prop_assert_eq!(a, b);
        for l in 1..=levels {
            let (fine, coarse) = (t.level(l - 1), t.level(l));
            for i in 0..coarse.dims[0] as u16 {
                for j in 0..coarse.dims[1] as u16 {
                    for k in 0..coarse.dims[2] as u16 {
                        let c = [i, j, k];
                        let any = children(c, fine.dims).any(|x| fine.is_occupied(x));
                        prop_assert_eq!(coarse.is_occupied(c), any);
                    }
                }
            }
        }
    }

    #[test]
    fn scene_file_roundtrip(scene in scene_strategy(10)) {
        prop_assert_eq!(decode_scene(&encode_scene(&scene)).unwrap(), scene);
    }

    #[test]
    fn voxelization_is_order_independent_and_sorted(
        pts in prop::collection::vec(((-1.6f64..1.6, -1.6f64..1.6, -0.4f64..1.2), 1..=C), 1..200),
        seed in any::<u64>(),
    ) {
        let grid = toy_grid([16, 16, 8]);
        let (points, labels): (Vec<_>, Vec<_>) = pts.iter().map(|&((x, y, z), l)| ([x, y, z], l)).unzip();
        let a = voxelize(&points, &labels, &grid, C).unwrap();
        let mut order: Vec<usize> = (0..points.len()).collect();
        let mut rng = seed;
        for i in (1..order.len()).rev() {
            rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            order.swap(i, (rng >> 33) as usize % (i + 1));
        }
        let b = voxelize(&order.iter().map(|&i| points[i]).collect::<Vec<_>>(), &order.iter().map(|&i| labels[i]).collect::<Vec<_>>(), &grid, C).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!(a.coords().windows(2).all(|w| w[0] < w[1]));
        prop_assert!(a.labels().iter().all(|&l| (1..=C).contains(&l)));
    }

    #[test]
    fn pack_and_unpack_are_inverse(
        cells in prop::collection::btree_set((0u16..4, 0u16..5, 0u16..3), 0..40),
        d in 1usize..4,
        seed in any::<u32>(),
    ) {
        let dims = [4, 5, 3];
        let coords: Vec<VoxelCoord> = cells.into_iter().map(|(a, b, c)| [a, b, c]).collect();
        let features: Vec<f32> = (0..coords.len() * d).map(|i| ((i as u32).wrapping_mul(2654435761) ^ seed) as f32 / u32::MAX as f32).collect();
        let sparse = SparseLatent::new(dims, d, coords.clone(), features).unwrap();
        let dense = pack_dense(&sparse).unwrap();
        let back = unpack_sparse(&dense, &OccupancyGrid::from_coords(dims, &coords)).unwrap();
        prop_assert_eq!(back, sparse);
    }

    #[test]
    fn aggregation_ignores_scan_order(
        scans in prop::collection::vec((prop::collection::vec(((-2.0f64..2.0, -2.0f64..2.0, 0.0f64..1.0), 1..=C), 1..40), -1.0f64..1.0, -3.0f64..3.0), 1..5),
        rot in 0usize..5,
    ) {
        let posed: Vec<PosedScan> = scans
            .iter()
            .enumerate()
            .map(|(i, (pts, tx, yaw))| {
                let (p, l): (Vec<_>, Vec<_>) = pts.iter().map(|&((x, y, z), l)| ([x, y, z], l)).unzip();
                PosedScan::new(format!("{i}"), p, l, RigidTransform::from_yaw(*yaw, [*tx, 0.5, 0.0])).unwrap()
            })
            .collect();
        let moving = BTreeSet::from([2]);
        let grid = auto_map_grid(&posed, &moving, 0.25);
        prop_assume!(grid.is_ok());
        let grid = grid.unwrap();
        let a = aggregate(&posed, &grid, &moving, C).unwrap();
        let mut rotated = posed.clone();
        rotated.rotate_left(rot % posed.len());
        rotated.reverse();
        let b = aggregate(&rotated, &grid, &moving, C).unwrap();
        prop_assert_eq!(a.scene(), b.scene());
        prop_assert!(a.scene().labels().iter().all(|&l| l != 2 && (1..=C).contains(&l)));
        let crop = crop_at_pose(&a, &RigidTransform::identity(), &grid).unwrap();
        prop_assert_eq!(crop.coords(), a.scene().coords());
        prop_assert_eq!(crop.labels(), a.scene().labels());
    }

    #[test]
    fn rigid_transforms_are_proper_rotations(yaw in -7.0f64..7.0, t in prop::array::uniform3(-50.0f64..50.0), p in prop::array::uniform3(-10.0f64..10.0)) {
        let r = RigidTransform::from_yaw(yaw, t);
        prop_assert!((r.rotation().determinant() - 1.0).abs() < 1e-9);
        let back = r.inverse().apply(r.apply(p));
        prop_assert!((0..3).all(|a| (back[a] - p[a]).abs() < 1e-9));
        prop_assert!(RigidTransform::from_row_major(&r.to_row_major()).is_ok());
    }

    #[test]
    fn simulated_points_hit_occupied_voxels(scene in scene_strategy(10), o in prop::array::uniform3(0.0f64..1.0)) {
        let g = scene.grid();
        let (min, max) = (g.min_corner(), g.max_corner());
        let origin = [0, 1, 2].map(|a| min[a] + o[a] * (max[a] - min[a]) * 0.999);
        let sensor = default_sensor("64-beam").unwrap().with_origin(origin);
        let cloud = simulate(&scene, &sensor).unwrap();
        prop_assert!(cloud.len() <= sensor.num_rays());
        for (p, &l) in cloud.points.iter().zip(&cloud.labels) {
            let c = g.voxel_index(*p);
            prop_assert!(c.is_some());
            prop_assert_eq!(scene.label_at(c.unwrap()), Some(l));
        }
        prop_assert_eq!(simulate(&scene, &sensor).unwrap().to_bytes(), cloud.to_bytes());
    }

    #[test]
    fn schedule_is_monotone_and_v_inverts(b0 in 1e-5f64..1e-2, span in 1e-4f64..0.3, steps in 2usize..400, t_frac in 0.0f64..1.0,
                                          z in prop::collection::vec(-3.0f64..3.0, 6), e in prop::collection::vec(-3.0f64..3.0, 6)) {
        let s = make_schedule(b0, b0 + span, steps).unwrap();
        for t in 2..=steps {
            prop_assert!(s.beta(t) > s.beta(t - 1));
            prop_assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
        prop_assert!(s.alpha_bar(steps) > 0.0);
        let t = 1 + ((steps - 1) as f64 * t_frac) as usize;
        let (z0, eps) = (tensor(&z), tensor(&e));
        let zt = corrupt(&z0, t, &eps, &s).unwrap();
        let v = v_target(&z0, &eps, t, &s).unwrap();
        for (got, want) in [(values(&eps_from_v(&v, &zt, t, &s).unwrap()), &e), (values(&z0_from_v(&v, &zt, t, &s).unwrap()), &z)] {
            for (a, b) in got.iter().zip(want.iter()) {
                prop_assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()));
            }
        }
    }

    #[test]
    fn loss_ranges(p in prop::collection::vec(0.0f64..=1.0, 1..50), bits in prop::collection::vec(any::<bool>(), 50),
                   mean in prop::collection::vec(-5.0f64..5.0, 1..20), lv in prop::collection::vec(-5.0f64..5.0, 20)) {
        let m: Vec<f64> = bits[..p.len()].iter().map(|&b| b as u8 as f64).collect();
        let d = dice(&tensor(&p), &tensor(&m)).unwrap().to_scalar::<f64>().unwrap();
        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&d));
        prop_assert!(bce(&tensor(&p), &tensor(&m)).unwrap().to_scalar::<f64>().unwrap() >= 0.0);
        let kl = latent_loss(&tensor(&mean), &tensor(&lv[..mean.len()])).unwrap().to_scalar::<f64>().unwrap();
        prop_assert!(kl >= -1e-12);
    }

    #[test]
    fn mmd_symmetry_nonnegativity_and_translation(
        a in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 3), 2..12),
        b in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 3), 2..12),
        shift in prop::array::uniform3(-10.0f64..10.0),
    ) {
        let (fa, fb) = (FeatureSet::new(&a).unwrap(), FeatureSet::new(&b).unwrap());
        for k in [Kernel::RbfMedian, Kernel::Rbf(1.5), Kernel::Linear] {
            for e in [Estimator::Unbiased, Estimator::Biased] {
                let ab = mmd_squared(&fa, &fb, k, e).unwrap();
                prop_assert!((ab - mmd_squared(&fb, &fa, k, e).unwrap()).abs() < 1e-12);
            }
            prop_assert!(mmd_squared(&fa, &fb, k, Estimator::Biased).unwrap() >= -1e-12);
            prop_assert!(mmd(&fa, &fa, k, Estimator::Biased).unwrap().abs() < 1e-12);
        }
        let moved = |rows: &[Vec<f64>]| FeatureSet::new(&rows.iter().map(|r| r.iter().zip(shift).map(|(x, s)| x + s).collect()).collect::<Vec<Vec<f64>>>()).unwrap();
        for k in [Kernel::RbfMedian, Kernel::Rbf(1.5)] {
            let before = mmd_squared(&fa, &fb, k, Estimator::Unbiased).unwrap();
            let after = mmd_squared(&moved(&a), &moved(&b), k, Estimator::Unbiased).unwrap();
            prop_assert!((before - after).abs() < 1e-9);
        }
    }

    #[test]
    fn miou_is_invariant_under_class_relabeling(rows in prop::collection::vec(prop::collection::vec(0u64..50, 5), 5), perm in Just((0..5usize).collect::<Vec<_>>()).prop_shuffle()) {
        let conf = ConfusionMatrix::from_rows(&rows).unwrap();
        let mut permuted = vec![vec![0u64; 5]; 5];
        for i in 0..5 {
            for j in 0..5 {
                permuted[perm[i]][perm[j]] = rows[i][j];
            }
        }
        let (a, b) = (iou(&conf), iou(&ConfusionMatrix::from_rows(&permuted).unwrap()));
        match (a.miou, b.miou) {
            (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-12),
            (x, y) => prop_assert_eq!(x, y),
        }
        for i in 0..5 {
            prop_assert_eq!(a.per_class[i].iou, b.per_class[perm[i]].iou);
        }
    }

    #[test]
    fn confusion_merge_is_commutative(pairs in prop::collection::vec((1..=C, 1..=C), 0..100), split in 0usize..100) {
        let split = split.min(pairs.len());
        let fill = |ps: &[(ClassId, ClassId)]| {
            let mut m = ConfusionMatrix::new(C);
            for &(g, p) in ps {
                m.add(g, p).unwrap();
            }
            m
        };
        let (mut x, y) = (fill(&pairs[..split]), fill(&pairs[split..]));
        let mut y2 = y.clone();
        x.merge(&y).unwrap();
        y2.merge(&fill(&pairs[..split])).unwrap();
        prop_assert_eq!(&x, &y2);
        prop_assert_eq!(x, fill(&pairs));
    }

    #[test]
    fn mixing_counts_and_uniqueness(pool in 1usize..400, synth in 0usize..400, r in 0.0f64..=1.0, extra in 0.0f64..2.0, fill in any::<bool>(), seed in any::<u64>()) {
        let real: Vec<String> = (0..pool).map(|i| format!("r{i}")).collect();
        let syn: Vec<String> = (0..synth).map(|i| format!("s{i}")).collect();
        let spec = if fill { MixSpec::fill(r, "a") } else { MixSpec::extend(r, extra, "a") };
        let (nr, ns) = spec.counts(pool).unwrap();
        match mix_datasets(&real, &syn, &spec, seed) {
            Ok(set) => {
                prop_assert_eq!((set.real, set.synthetic), (nr, ns));
                let ids: BTreeSet<_> = set.entries.iter().map(|e| (e.origin, e.id.clone())).collect();
                prop_assert_eq!(ids.len(), set.entries.len());
                prop_assert_eq!(set.entries.iter().filter(|e| e.origin == Origin::Real).count(), nr);
                if fill {
                    prop_assert_eq!(nr + ns, pool);
                }
            }
            Err(_) => prop_assert!(ns > synth),
        }
        let only_real = MixSpec::fill(1.0, "a");
        let a = mix_datasets(&real, &syn, &only_real, seed).unwrap();
        let b = mix_datasets(&real, &[], &MixSpec::fill(1.0, "b"), seed).unwrap();
        prop_assert_eq!(a.entries, b.entries);
    }

    #[test]
    fn config_fingerprint_changes_iff_a_value_changes(pick in any::<prop::sample::Index>(), bump in 1u64..4) {
        let base = RunConfig::default();
        let flat = base.flatten();
        let numeric: Vec<(&String, &serde_json::Value)> = flat.iter().filter(|(_, v)| v.is_u64()).collect();
        let (key, v) = numeric[pick.index(numeric.len())];
        let same = base.apply(&[(key.clone(), v.to_string())], Layer::Flag).unwrap();
        prop_assert_eq!(same.fingerprint(), base.fingerprint());
        let changed = base.apply(&[(key.clone(), (v.as_u64().unwrap() + bump).to_string())], Layer::Flag).unwrap();
        prop_assert_ne!(changed.fingerprint(), base.fingerprint());
    }
}

#[test]
fn labels_outside_range_are_rejected() {
    let g = toy_grid([2, 2, 2]);
    assert!(VoxelScene::new(g, C, vec![[0, 0, 0]], vec![0]).is_err());
    assert!(VoxelScene::new(g, C, vec![[0, 0, 0]], vec![C + 1]).is_err());
}
