//! Rotating-LiDAR simulation by exact voxel traversal.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scene::{ClassId, Point3, VoxelScene};

/// Beam layout and range limits of a spinning sensor.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorModel {
    elevations_deg: Vec<f64>,
    azimuth_step_deg: f64,
    origin: Point3,
    min_range: f64,
    max_range: f64,
    jitter: Option<RangeJitter>,
}

/// Optional Gaussian noise on the returned range, seeded so simulation
/// stays a pure function of its inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RangeJitter {
    pub std_m: f64,
    pub seed: u64,
}

impl SensorModel {
    pub fn new(
        elevations_deg: Vec<f64>,
        azimuth_step_deg: f64,
        origin: Point3,
        min_range: f64,
        max_range: f64,
    ) -> Result<Self> {
        if elevations_deg.is_empty() || elevations_deg.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("beam elevations must be non-empty and strictly increasing".into()));
        }
        if !(0.0 < min_range && min_range < max_range && max_range.is_finite()) {
            return Err(Error::Config(format!("range limits [{min_range}, {max_range}] invalid")));
        }
        let bins = 360.0 / azimuth_step_deg;
        if !(azimuth_step_deg > 0.0) || ((bins - bins.round()) * azimuth_step_deg).abs() > 1e-9 {
            return Err(Error::Config(format!("azimuth step {azimuth_step_deg} does not divide 360")));
        }
        Ok(Self { elevations_deg, azimuth_step_deg, origin, min_range, max_range, jitter: None })
    }

    pub fn with_origin(mut self, origin: Point3) -> Self {
        self.origin = origin;
        self
    }

    pub fn with_jitter(mut self, jitter: Option<RangeJitter>) -> Self {
        self.jitter = jitter;
        self
    }

    pub fn elevations_deg(&self) -> &[f64] {
        &self.elevations_deg
    }

    pub fn azimuth_bins(&self) -> usize {
        (360.0 / self.azimuth_step_deg).round() as usize
    }

    pub fn origin(&self) -> Point3 {
        self.origin
    }

    pub fn num_rays(&self) -> usize {
        self.elevations_deg.len() * self.azimuth_bins()
    }
}

/// Built-in beam layouts: `"64-beam"` spans -24.9..+2 deg, `"128-beam"`
/// spans +-22.5 deg; both at 0.2 deg azimuth, 0.5-80 m, origin at zero.
pub fn default_sensor(profile: &str) -> Result<SensorModel> {
    let (n, lo, hi) = match profile {
        "64-beam" => (64, -24.9, 2.0),
        "128-beam" => (128, -22.5, 22.5),
        other => return Err(Error::Config(format!("unknown sensor profile {other:?}"))),
    };
    let elevations = (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect();
    SensorModel::new(elevations, 0.2, [0.0; 3], 0.5, 80.0)
}

/// File extension of saved clouds.
pub const EXTENSION: &str = "lidar";

/// Simulated returns in `(beam, azimuth)` order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LidarCloud {
    pub points: Vec<Point3>,
    pub labels: Vec<ClassId>,
}

impl LidarCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// 13-byte records: f32 x, y, z then u8 label, little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(self.len() * 13);
        for (p, &l) in self.points.iter().zip(&self.labels) {
            for v in p {
                buf.extend_from_slice(&(*v as f32).to_le_bytes());
            }
            buf.push(l);
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() % 13 != 0 {
            return Err(Error::format(format!("{} bytes is not a whole number of point records", bytes.len())));
        }
        let mut cloud = LidarCloud::default();
        for r in bytes.chunks_exact(13) {
            let f = |o: usize| f32::from_le_bytes(r[o..o + 4].try_into().unwrap()) as f64;
            cloud.points.push([f(0), f(4), f(8)]);
            cloud.labels.push(r[12]);
        }
        Ok(cloud)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Casts every beam from the sensor origin and keeps the center of the
/// first occupied voxel on the ray if its entry distance is within range.
/// A voxel closer than the minimum range still blocks the ray; the cell
/// holding the sensor is never a hit.
pub fn simulate(scene: &VoxelScene, sensor: &SensorModel) -> Result<LidarCloud> {
    let grid = scene.grid();
    if !grid.contains_point(sensor.origin) {
        return Err(Error::RejectedInput(format!("sensor origin {:?} outside scene grid", sensor.origin)));
    }
    let dims = grid.dims();
    let mut labels = vec![0u8; grid.num_cells()];
    for (c, l) in scene.iter() {
        labels[(c[0] as usize * dims[1] + c[1] as usize) * dims[2] + c[2] as usize] = l;
    }
    let res = grid.resolution();
    let min = grid.min_corner();
    let start = [
        (sensor.origin[0] - min[0]) / res,
        (sensor.origin[1] - min[1]) / res,
        (sensor.origin[2] - min[2]) / res,
    ];
    let t_min = sensor.min_range / res;
    let t_max = sensor.max_range / res;
    let mut noise = sensor
        .jitter
        .map(|j| (ChaCha8Rng::seed_from_u64(j.seed), Normal::new(0.0, j.std_m.max(0.0)).expect("finite std")));

    let mut cloud = LidarCloud::default();
    let bins = sensor.azimuth_bins();
    for &elev in &sensor.elevations_deg {
        let (se, ce) = elev.to_radians().sin_cos();
        for a in 0..bins {
            let (sa, ca) = (a as f64 * sensor.azimuth_step_deg).to_radians().sin_cos();
            let dir = [ce * ca, ce * sa, se];
            if let Some(cell) = first_hit(&labels, dims, start, dir, t_min, t_max) {
                let label = labels[(cell[0] * dims[1] + cell[1]) * dims[2] + cell[2]];
                let mut p = grid.voxel_center([cell[0] as u16, cell[1] as u16, cell[2] as u16]);
                if let Some((rng, normal)) = noise.as_mut() {
                    let dr: f64 = normal.sample(rng);
                    for (axis, d) in dir.iter().enumerate() {
                        p[axis] += dr * d;
                    }
                }
                cloud.points.push(p);
                cloud.labels.push(label);
            }
        }
    }
    Ok(cloud)
}

/// Amanatides-Woo traversal in grid units. Returns the first occupied cell
/// after the origin cell if it is entered at a ray parameter in
/// `[t_min, t_max]`.
fn first_hit(
    labels: &[u8],
    dims: [usize; 3],
    start: [f64; 3],
    dir: [f64; 3],
    t_min: f64,
    t_max: f64,
) -> Option<[usize; 3]> {
    let mut cell = [0i64; 3];
    let mut step = [0i64; 3];
    let mut t_next = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    for a in 0..3 {
        cell[a] = start[a].floor() as i64;
        if dir[a] > 0.0 {
            step[a] = 1;
            t_delta[a] = 1.0 / dir[a];
            t_next[a] = (cell[a] as f64 + 1.0 - start[a]) / dir[a];
        } else if dir[a] < 0.0 {
            step[a] = -1;
            t_delta[a] = -1.0 / dir[a];
            t_next[a] = (cell[a] as f64 - start[a]) / dir[a];
        }
    }
    let mut t_enter = 0.0;
    loop {
        if t_enter > t_max {
            return None;
        }
        let idx = (cell[0] as usize * dims[1] + cell[1] as usize) * dims[2] + cell[2] as usize;
        if labels[idx] != 0 && t_enter > 0.0 {
            return (t_enter >= t_min).then(|| [cell[0] as usize, cell[1] as usize, cell[2] as usize]);
        }
        let axis = if t_next[0] <= t_next[1] && t_next[0] <= t_next[2] {
            0
        } else if t_next[1] <= t_next[2] {
            1
        } else {
            2
        };
        if !t_next[axis].is_finite() {
            return None;
        }
        t_enter = t_next[axis];
        t_next[axis] += t_delta[axis];
        cell[axis] += step[axis];
        if cell[axis] < 0 || cell[axis] >= dims[axis] as i64 {
            return None;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::GridSpec;

    fn grid() -> GridSpec {
        GridSpec::new([-16.0, -16.0, -2.0], [16.0, 16.0, 2.0], 0.5).unwrap()
    }

    fn forward_only() -> SensorModel {
        SensorModel::new(vec![0.0], 90.0, [0.25, 0.25, 0.25], 0.5, 30.0).unwrap()
    }

    #[test]
    fn empty_scene_no_points() {
        let s = VoxelScene::empty(grid(), 3);
        assert!(simulate(&s, &default_sensor("64-beam").unwrap()).unwrap().is_empty());
    }

    #[test]
    fn single_voxel_on_forward_ray() {
        let g = grid();
        let c = g.voxel_index([10.25, 0.25, 0.25]).unwrap();
        let s = VoxelScene::new(g, 3, vec![c], vec![2]).unwrap();
        let cloud = simulate(&s, &forward_only()).unwrap();
        assert_eq!(cloud.labels, vec![2]);
        assert_eq!(cloud.points, vec![g.voxel_center(c)]);
    }

    #[test]
    fn nearer_voxel_occludes() {
        let g = grid();
        let near = g.voxel_index([5.25, 0.25, 0.25]).unwrap();
        let far = g.voxel_index([10.25, 0.25, 0.25]).unwrap();
        let s = VoxelScene::new(g, 3, vec![near, far], vec![1, 3]).unwrap();
        let cloud = simulate(&s, &forward_only()).unwrap();
        assert_eq!(cloud.labels, vec![1]);
        assert_eq!(cloud.points, vec![g.voxel_center(near)]);
    }

    #[test]
    fn voxel_below_min_range_blocks_the_ray() {
        let g = grid();
        let near = g.voxel_index([0.75, 0.25, 0.25]).unwrap();
        let far = g.voxel_index([10.25, 0.25, 0.25]).unwrap();
        let s = VoxelScene::new(g, 3, vec![near, far], vec![1, 3]).unwrap();
        assert!(simulate(&s, &forward_only()).unwrap().is_empty());
        let own = g.voxel_index([0.25, 0.25, 0.25]).unwrap();
        let s = VoxelScene::new(g, 3, vec![own, far], vec![1, 3]).unwrap();
        assert_eq!(simulate(&s, &forward_only()).unwrap().labels, vec![3]);
    }

    #[test]
    fn out_of_range_is_dropped() {
        let g = grid();
        let c = g.voxel_index([10.25, 0.25, 0.25]).unwrap();
        let s = VoxelScene::new(g, 3, vec![c], vec![2]).unwrap();
        let short = SensorModel::new(vec![0.0], 90.0, [0.25, 0.25, 0.25], 0.5, 5.0).unwrap();
        assert!(simulate(&s, &short).unwrap().is_empty());
    }

    #[test]
    fn profiles() {
        assert_eq!(default_sensor("64-beam").unwrap().elevations_deg().len(), 64);
        assert_eq!(default_sensor("128-beam").unwrap().elevations_deg().len(), 128);
        assert_eq!(default_sensor("64-beam").unwrap().azimuth_bins(), 1800);
        assert!(default_sensor("32-beam").is_err());
    }

    #[test]
    fn origin_outside_grid_is_error() {
        let s = VoxelScene::empty(grid(), 3);
        let sensor = forward_only().with_origin([100.0, 0.0, 0.0]);
        assert!(simulate(&s, &sensor).is_err());
    }

    #[test]
    fn cloud_bytes_roundtrip() {
        let cloud = LidarCloud { points: vec![[1.5, -2.0, 0.25]], labels: vec![7] };
        let bytes = cloud.to_bytes();
        assert_eq!(bytes.len(), 13);
        assert_eq!(LidarCloud::from_bytes(&bytes).unwrap(), cloud);
    }
}
