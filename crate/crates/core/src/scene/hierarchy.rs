use std::collections::HashMap;

use super::{downsampled_dims, ClassId, LabelHistogram, OccupancyGrid, VoxelCoord, VoxelScene};
use crate::error::{Error, Result};

/// Occupied cells and their semantic targets at one hierarchy level.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelTarget {
    pub dims: [usize; 3],
    /// Sorted occupied cells; the occupancy mask is 1 exactly here.
    pub coords: Vec<VoxelCoord>,
    pub labels: Vec<ClassId>,
}

impl LevelTarget {
    pub fn is_occupied(&self, c: VoxelCoord) -> bool {
        self.coords.binary_search(&c).is_ok()
    }

    pub fn label_at(&self, c: VoxelCoord) -> Option<ClassId> {
        self.coords.binary_search(&c).ok().map(|i| self.labels[i])
    }

    pub fn mask(&self) -> OccupancyGrid {
        OccupancyGrid::from_coords(self.dims, &self.coords)
    }
}

/// Per-level occupancy and semantic targets. Level 0 is the input scene,
/// level `l` halves (rounding up) the dims of level `l - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct HierarchyTargets {
    levels: Vec<LevelTarget>,
}

impl HierarchyTargets {
    /// Number of downsampling steps; there are `depth() + 1` levels.
    pub fn depth(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn level(&self, l: usize) -> &LevelTarget {
        &self.levels[l]
    }

    pub fn levels(&self) -> &[LevelTarget] {
        &self.levels
    }
}

/// Downsamples `scene` `levels` times: a parent cell is occupied iff any of
/// its 2x2x2 children is, and takes the majority label of its occupied
/// children (ties to the smallest id).
pub fn downsample_scene(scene: &VoxelScene, levels: usize) -> Result<HierarchyTargets> {
    if levels == 0 {
        return Err(Error::Config("hierarchy needs at least one level".into()));
    }
    let dims = scene.grid().dims();
    let max_levels = max_useful_levels(dims);
    if levels > max_levels {
        return Err(Error::Config(format!(
            "{levels} levels requested but grid {dims:?} collapses to one cell after {max_levels}"
        )));
    }
    let mut out = Vec::with_capacity(levels + 1);
    out.push(LevelTarget { dims, coords: scene.coords().to_vec(), labels: scene.labels().to_vec() });
    for l in 1..=levels {
        let prev = &out[l - 1];
        let mut parents: HashMap<VoxelCoord, LabelHistogram> = HashMap::with_capacity(prev.coords.len() / 2);
        for (c, &label) in prev.coords.iter().zip(&prev.labels) {
            parents.entry(parent_of(*c)).or_default().add(label, 1);
        }
        let mut cells: Vec<(VoxelCoord, ClassId)> = parents
            .into_iter()
            .map(|(c, h)| (c, h.majority().expect("non-empty histogram")))
            .collect();
        cells.sort_unstable_by_key(|p| p.0);
        let (coords, labels) = cells.into_iter().unzip();
        out.push(LevelTarget { dims: downsampled_dims(dims, l), coords, labels });
    }
    Ok(HierarchyTargets { levels: out })
}

/// Halvings until every axis has a single cell.
pub(crate) fn max_useful_levels(dims: [usize; 3]) -> usize {
    let max = dims.into_iter().max().unwrap_or(1).max(1);
    (usize::BITS - (max - 1).leading_zeros()) as usize
}

#[inline]
pub(crate) fn parent_of(c: VoxelCoord) -> VoxelCoord {
    [c[0] >> 1, c[1] >> 1, c[2] >> 1]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::GridSpec;

    fn grid(n: [usize; 3]) -> GridSpec {
        GridSpec::from_dims([0.0; 3], n, 1.0).unwrap()
    }

    #[test]
    fn single_voxel_stays_single() {
        let s = VoxelScene::new(grid([4, 4, 4]), 3, vec![[3, 1, 2]], vec![2]).unwrap();
        let h = downsample_scene(&s, 2).unwrap();
        for lvl in h.levels() {
            assert_eq!(lvl.coords.len(), 1);
            assert_eq!(lvl.labels, vec![2]);
        }
        assert_eq!(h.level(1).coords, vec![[1, 0, 1]]);
        assert_eq!(h.level(2).coords, vec![[0, 0, 0]]);
    }

    #[test]
    fn full_uniform_scene() {
        let mut coords = Vec::new();
        for i in 0..8u16 {
            for j in 0..8u16 {
                for k in 0..8u16 {
                    coords.push([i, j, k]);
                }
            }
        }
        let n = coords.len();
        let s = VoxelScene::new(grid([8, 8, 8]), 4, coords, vec![2; n]).unwrap();
        let h = downsample_scene(&s, 3).unwrap();
        for (l, lvl) in h.levels().iter().enumerate() {
            let side = 8 >> l;
            assert_eq!(lvl.coords.len(), side * side * side);
            assert!(lvl.labels.iter().all(|&x| x == 2));
        }
    }

    #[test]
    fn block_majority() {
        let mut coords = Vec::new();
        for i in 0..2u16 {
            for j in 0..2u16 {
                for k in 0..2u16 {
                    coords.push([i, j, k]);
                }
            }
        }
        let s = VoxelScene::new(grid([2, 2, 2]), 5, coords, vec![1, 1, 1, 1, 2, 2, 2, 5]).unwrap();
        let h = downsample_scene(&s, 1).unwrap();
        assert_eq!(h.level(1).labels, vec![1]);
    }

    #[test]
    fn odd_dims_round_up() {
        let s = VoxelScene::new(grid([5, 3, 1]), 2, vec![[4, 2, 0]], vec![1]).unwrap();
        let h = downsample_scene(&s, 2).unwrap();
        assert_eq!(h.level(1).dims, [3, 2, 1]);
        assert_eq!(h.level(2).dims, [2, 1, 1]);
        assert_eq!(h.level(2).coords, vec![[1, 0, 0]]);
    }

    #[test]
    fn too_many_levels_is_an_error() {
        let s = VoxelScene::empty(grid([4, 4, 1]), 2);
        assert!(downsample_scene(&s, 2).is_ok());
        assert!(downsample_scene(&s, 3).is_err());
        assert!(downsample_scene(&s, 0).is_err());
    }

    #[test]
    fn useful_levels() {
        assert_eq!(max_useful_levels([1, 1, 1]), 0);
        assert_eq!(max_useful_levels([4, 4, 1]), 2);
        assert_eq!(max_useful_levels([5, 2, 2]), 3);
        assert_eq!(max_useful_levels([512, 512, 64]), 9);
    }
}
