//! Rolling local elevation map.
//!
//! The window is a square of cells aligned to a global lattice (cell centers at
//! integer multiples of the resolution), so recentering is a pure integer shift
//! and never resamples retained cells. Each cell runs a scalar Kalman filter on
//! the height of points that fall into it.

use nalgebra::{Point3, Vector3};
use thiserror::Error;

use crate::fusion::Submap;
use crate::gridmap::{Frame, GridError, GridGeometry, MultiLayerGrid, VARIANCE};
use crate::pointcloud::{CloudError, PointCloud};
use crate::scalar::{same_value, same_values, GridScalar};
use crate::se3::{self, Pose};

pub const SAMPLE_COUNT: &str = "sample_count";
pub const LAST_UPDATE: &str = "last_update";

#[derive(Debug, Error)]
pub enum ElevationError {
    #[error("invalid rolling-map configuration: {0}")]
    Config(String),
    #[error("sensor pose is not a valid rigid transform")]
    MalformedPose,
    #[error(transparent)]
    Cloud(#[from] CloudError),
    #[error("requested submap does not fit inside the current window")]
    OutOfWindow,
    #[error(transparent)]
    Grid(#[from] GridError),
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct RollingMapConfig {
    /// Side length of the square window in meters.
    pub window_side: f64,
    pub resolution: f64,
    /// Range-proportional measurement standard deviation at 1 m.
    pub sensor_sigma_at_1m: f64,
    pub mahalanobis_gate: f64,
    /// Height band relative to the sensor; points outside are dropped and
    /// cells whose estimate falls outside are re-initialized.
    pub min_height: f64,
    pub max_height: f64,
    /// Lower bound on the per-measurement variance.
    pub min_variance: f64,
}

impl Default for RollingMapConfig {
    fn default() -> Self {
        Self {
            window_side: 6.0,
            resolution: 0.02,
            sensor_sigma_at_1m: 0.01,
            mahalanobis_gate: 3.0,
            min_height: -2.0,
            max_height: 1.0,
            min_variance: 1e-10,
        }
    }
}

impl RollingMapConfig {
    pub fn validate(&self) -> Result<(), ElevationError> {
        let bad = |m: &str| Err(ElevationError::Config(m.into()));
        if !(self.window_side > 0.0 && self.window_side.is_finite()) {
            return bad("window_side must be positive");
        }
        if !(self.resolution > 0.0 && self.resolution.is_finite()) {
            return bad("resolution must be positive");
        }
        if !(self.mahalanobis_gate > 0.0) {
            return bad("mahalanobis_gate must be positive");
        }
        if !(self.sensor_sigma_at_1m >= 0.0) {
            return bad("sensor_sigma_at_1m must be non-negative");
        }
        if !(self.min_height < self.max_height) {
            return bad("min_height must be below max_height");
        }
        if !(self.min_variance > 0.0) {
            return bad("min_variance must be positive");
        }
        if (self.window_side / self.resolution).round() < 1.0 {
            return bad("window smaller than one cell");
        }
        Ok(())
    }

    fn cells_per_side(&self) -> usize {
        (self.window_side / self.resolution).round() as usize
    }
}

/// Sensor pose in the odometry frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorPose {
    pub pose: Pose,
    pub stamp: f64,
}

/// State of one elevation cell.
#[derive(Debug, Clone, Copy)]
pub struct ElevationCell<T> {
    pub height: T,
    pub variance: T,
    pub sample_count: u32,
    pub last_update: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IntegrationStats {
    pub accepted: usize,
    pub rejected: usize,
    pub discarded: usize,
}

#[derive(Debug, Clone)]
pub struct RollingElevationMap<T = f64> {
    config: RollingMapConfig,
    side: usize,
    /// Global lattice index (col, row) of local cell (0, 0).
    anchor: (i64, i64),
    height: Vec<T>,
    variance: Vec<T>,
    count: Vec<u32>,
    stamp: Vec<f64>,
}

impl<T: GridScalar> PartialEq for ElevationCell<T> {
    fn eq(&self, o: &Self) -> bool {
        same_value(self.height, o.height)
            && same_value(self.variance, o.variance)
            && self.sample_count == o.sample_count
            && same_value(self.last_update, o.last_update)
    }
}

impl<T: GridScalar> PartialEq for RollingElevationMap<T> {
    fn eq(&self, o: &Self) -> bool {
        self.config == o.config
            && self.side == o.side
            && self.anchor == o.anchor
            && same_values(&self.height, &o.height)
            && same_values(&self.variance, &o.variance)
            && self.count == o.count
            && same_values(&self.stamp, &o.stamp)
    }
}

fn lattice(v: f64, res: f64) -> i64 {
    crate::scalar::round_half_down(v / res) as i64
}

impl<T: GridScalar> RollingElevationMap<T> {
    /// Empty map whose window is centered (to within one cell) on `center`.
    pub fn new(config: RollingMapConfig, center: [f64; 2]) -> Result<Self, ElevationError> {
        config.validate()?;
        let side = config.cells_per_side();
        let n = side * side;
        let mut map = Self {
            anchor: (0, 0),
            side,
            height: vec![T::nan(); n],
            variance: vec![T::nan(); n],
            count: vec![0; n],
            stamp: vec![f64::NAN; n],
            config,
        };
        map.anchor = map.anchor_for(center);
        Ok(map)
    }

    fn anchor_for(&self, center: [f64; 2]) -> (i64, i64) {
        let half = (self.side / 2) as i64;
        let res = self.config.resolution;
        (lattice(center[0], res) - half, lattice(center[1], res) - half)
    }

    pub fn config(&self) -> &RollingMapConfig {
        &self.config
    }

    pub fn geometry(&self) -> GridGeometry<T> {
        let res = self.config.resolution;
        GridGeometry::new(
            T::of(res),
            [T::of(self.anchor.0 as f64 * res), T::of(self.anchor.1 as f64 * res)],
            self.side,
            self.side,
        )
        .expect("validated configuration")
    }

    /// Map-frame center of the window.
    pub fn center(&self) -> [f64; 2] {
        let res = self.config.resolution;
        let half = (self.side / 2) as f64;
        [(self.anchor.0 as f64 + half) * res, (self.anchor.1 as f64 + half) * res]
    }

    fn local_index(&self, x: f64, y: f64) -> Option<usize> {
        let res = self.config.resolution;
        let c = lattice(x, res) - self.anchor.0;
        let r = lattice(y, res) - self.anchor.1;
        let n = self.side as i64;
        (c >= 0 && r >= 0 && c < n && r < n).then(|| (r * n + c) as usize)
    }

    pub fn cell_at(&self, p: [f64; 2]) -> Option<ElevationCell<T>> {
        self.local_index(p[0], p[1]).map(|i| self.cell(i))
    }

    fn cell(&self, i: usize) -> ElevationCell<T> {
        ElevationCell {
            height: self.height[i],
            variance: self.variance[i],
            sample_count: self.count[i],
            last_update: self.stamp[i],
        }
    }

    fn clear_cell(&mut self, i: usize) {
        self.height[i] = T::nan();
        self.variance[i] = T::nan();
        self.count[i] = 0;
        self.stamp[i] = f64::NAN;
    }

    /// Fuses a sensor-frame cloud taken at `pose`.
    pub fn integrate_cloud(&mut self, cloud: &PointCloud, pose: &SensorPose) -> Result<IntegrationStats, ElevationError> {
        if !se3::is_valid(&pose.pose) || !pose.stamp.is_finite() {
            return Err(ElevationError::MalformedPose);
        }
        let mut stats = IntegrationStats::default();
        if cloud.is_empty() {
            return Ok(stats);
        }
        cloud.validate()?;
        let sensor_z = pose.pose.translation.z;
        let lo = sensor_z + self.config.min_height;
        let hi = sensor_z + self.config.max_height;
        let gate2 = self.config.mahalanobis_gate * self.config.mahalanobis_gate;
        for (k, p) in cloud.points.iter().enumerate() {
            let w: Point3<f64> = pose.pose * p;
            if w.z < lo || w.z > hi {
                stats.discarded += 1;
                continue;
            }
            let Some(i) = self.local_index(w.x, w.y) else {
                stats.discarded += 1;
                continue;
            };
            let sigma = match &cloud.sigmas {
                Some(s) => s[k],
                None => Vector3::from(p.coords).norm() * self.config.sensor_sigma_at_1m,
            };
            let r = (sigma * sigma).max(self.config.min_variance);
            if self.count[i] > 0 {
                let h = self.height[i].f64();
                if h < lo || h > hi {
                    self.clear_cell(i);
                }
            }
            if self.count[i] == 0 {
                self.height[i] = T::of(w.z);
                self.variance[i] = T::of(r);
                self.count[i] = 1;
                self.stamp[i] = cloud.stamp;
                stats.accepted += 1;
                continue;
            }
            let h = self.height[i].f64();
            let pv = self.variance[i].f64();
            let dz = w.z - h;
            if dz * dz > gate2 * (pv + r) {
                stats.rejected += 1;
                continue;
            }
            let s = pv + r;
            self.height[i] = T::of((r * h + pv * w.z) / s);
            self.variance[i] = T::of(pv * r / s);
            self.count[i] += 1;
            self.stamp[i] = cloud.stamp;
            stats.accepted += 1;
        }
        Ok(stats)
    }

    /// Moves the window by whole cells so that it is centered near `new_center`.
    pub fn recenter(&mut self, new_center: [f64; 2]) {
        let anchor = self.anchor_for(new_center);
        if anchor == self.anchor {
            return;
        }
        let (dc, dr) = (anchor.0 - self.anchor.0, anchor.1 - self.anchor.1);
        let n = self.side as i64;
        let mut height = vec![T::nan(); self.height.len()];
        let mut variance = vec![T::nan(); self.height.len()];
        let mut count = vec![0u32; self.height.len()];
        let mut stamp = vec![f64::NAN; self.height.len()];
        for r in 0..n {
            let sr = r + dr;
            if sr < 0 || sr >= n {
                continue;
            }
            for c in 0..n {
                let sc = c + dc;
                if sc < 0 || sc >= n {
                    continue;
                }
                let (dst, src) = ((r * n + c) as usize, (sr * n + sc) as usize);
                height[dst] = self.height[src];
                variance[dst] = self.variance[src];
                count[dst] = self.count[src];
                stamp[dst] = self.stamp[src];
            }
        }
        self.height = height;
        self.variance = variance;
        self.count = count;
        self.stamp = stamp;
        self.anchor = anchor;
    }

    /// Layers `elevation`, `variance`, `sample_count` and `last_update` in the odom frame.
    pub fn to_grid(&self) -> MultiLayerGrid<T> {
        let mut g = MultiLayerGrid::new(self.geometry(), Frame::Odom);
        g.elevation_mut().copy_from_slice(&self.height);
        g.insert_layer(VARIANCE, self.variance.clone()).expect("sized");
        g.insert_layer(SAMPLE_COUNT, self.count.iter().map(|&c| T::of(c as f64)).collect())
            .expect("sized");
        g.insert_layer(LAST_UPDATE, self.stamp.iter().map(|&s| T::of(s)).collect()).expect("sized");
        g
    }

    /// Frozen `side x side` crop around the node position, with elevation and variance.
    pub fn snapshot_submap(&self, node_id: usize, node_pose: &Pose, side: f64) -> Result<Submap<T>, ElevationError> {
        self.snapshot_submap_since(node_id, node_pose, side, f64::NEG_INFINITY)
    }

    /// Like `snapshot_submap`, keeping only cells last updated at or after `since`.
    pub fn snapshot_submap_since(
        &self,
        node_id: usize,
        node_pose: &Pose,
        side: f64,
        since: f64,
    ) -> Result<Submap<T>, ElevationError> {
        if !(side > 0.0) || side > self.config.window_side {
            return Err(ElevationError::OutOfWindow);
        }
        let p = node_pose.translation.vector;
        if self.local_index(p.x, p.y).is_none() {
            return Err(ElevationError::OutOfWindow);
        }
        let h = side / 2.0;
        let mut grid = self.to_grid();
        for (i, &st) in self.stamp.iter().enumerate() {
            if !(st >= since) {
                grid.elevation_mut()[i] = T::nan();
                grid.layer_mut(VARIANCE).expect("inserted")[i] = T::nan();
            }
        }
        grid.remove_layer(SAMPLE_COUNT)?;
        grid.remove_layer(LAST_UPDATE)?;
        let crop = grid.crop([T::of(p.x - h), T::of(p.y - h)], [T::of(p.x + h), T::of(p.y + h)])?;
        Ok(Submap { grid: crop, capture_node: node_id, capture_pose: *node_pose })
    }

    pub fn known_cells(&self) -> usize {
        self.count.iter().filter(|&&c| c > 0).count()
    }
}
