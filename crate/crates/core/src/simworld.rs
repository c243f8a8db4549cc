//! Deterministic synthetic worlds: scenes, gait trajectories, depth clouds,
//! drifting odometry, keyframes and room labels.

use nalgebra::{Point3, Translation3, UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluation::TriMesh;
use crate::localization::{CameraIntrinsics, Descriptor, Keyframe};
use crate::pointcloud::PointCloud;
use crate::se3::{self, Pose};
use crate::trajectory::Trajectory;

/// Class assigned to positions outside every room polygon.
pub const FALLBACK_CLASS: &str = "corridor";

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scene: {0}")]
    Scene(String),
    #[error("invalid gait: {0}")]
    Gait(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoomSpec {
    pub polygon: Vec<[f64; 2]>,
    pub class: String,
    #[serde(default)]
    pub floor_z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WallSpec {
    pub from: [f64; 2],
    pub to: [f64; 2],
    pub height: f64,
    #[serde(default = "default_wall_thickness")]
    pub thickness: f64,
    #[serde(default)]
    pub base_z: f64,
}

fn default_wall_thickness() -> f64 {
    0.1
}

/// Straight flight ascending along `yaw` from the bottom edge center `origin`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaircaseSpec {
    pub origin: [f64; 2],
    #[serde(default)]
    pub yaw: f64,
    #[serde(default)]
    pub base_z: f64,
    pub riser: f64,
    pub tread: f64,
    pub steps: usize,
    pub width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxSpec {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SceneSpec {
    #[serde(default)]
    pub rooms: Vec<RoomSpec>,
    #[serde(default)]
    pub walls: Vec<WallSpec>,
    #[serde(default)]
    pub staircases: Vec<StaircaseSpec>,
    #[serde(default)]
    pub obstacles: Vec<BoxSpec>,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Scene(m));
        for (i, r) in self.rooms.iter().enumerate() {
            if !is_simple_polygon(&r.polygon) {
                return bad(format!("room {i} polygon is not simple"));
            }
            if r.class.is_empty() || !r.floor_z.is_finite() {
                return bad(format!("room {i} needs a class and finite floor"));
            }
        }
        for (i, w) in self.walls.iter().enumerate() {
            let len = (Vector2::from(w.to) - Vector2::from(w.from)).norm();
            if !(len > 0.0 && w.height > 0.0 && w.thickness > 0.0) {
                return bad(format!("wall {i} needs positive length, height and thickness"));
            }
        }
        for (i, s) in self.staircases.iter().enumerate() {
            if !(s.riser > 0.0 && s.tread > 0.0 && s.width > 0.0 && s.steps > 0) {
                return bad(format!("staircase {i} needs positive riser, tread, width and steps"));
            }
        }
        for (i, b) in self.obstacles.iter().enumerate() {
            if !(0..3).all(|k| b.min[k] < b.max[k]) {
                return bad(format!("obstacle {i} has an empty extent"));
            }
        }
        Ok(())
    }
}

/// Twice the signed area; positive for counter-clockwise order.
fn signed_area2(poly: &[[f64; 2]]) -> f64 {
    (0..poly.len())
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % poly.len()]);
            a[0] * b[1] - b[0] * a[1]
        })
        .sum()
}

fn cross2(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn segments_intersect(p1: [f64; 2], p2: [f64; 2], q1: [f64; 2], q2: [f64; 2]) -> bool {
    let d1 = cross2(q1, q2, p1);
    let d2 = cross2(q1, q2, p2);
    let d3 = cross2(p1, p2, q1);
    let d4 = cross2(p1, p2, q2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    let on = |a: [f64; 2], b: [f64; 2], p: [f64; 2], d: f64| {
        d == 0.0 && p[0] >= a[0].min(b[0]) && p[0] <= a[0].max(b[0]) && p[1] >= a[1].min(b[1]) && p[1] <= a[1].max(b[1])
    };
    on(q1, q2, p1, d1) || on(q1, q2, p2, d2) || on(p1, p2, q1, d3) || on(p1, p2, q2, d4)
}

pub fn is_simple_polygon(poly: &[[f64; 2]]) -> bool {
    let n = poly.len();
    if n < 3 || poly.iter().any(|p| !(p[0].is_finite() && p[1].is_finite())) || signed_area2(poly) == 0.0 {
        return false;
    }
    for i in 0..n {
        for j in i + 1..n {
            let adjacent = j == i + 1 || (i == 0 && j == n - 1);
            if adjacent {
                continue;
            }
            if segments_intersect(poly[i], poly[(i + 1) % n], poly[j], poly[(j + 1) % n]) {
                return false;
            }
        }
    }
    true
}

/// Point-in-polygon with the boundary counted as inside.
pub fn polygon_contains(poly: &[[f64; 2]], p: [f64; 2]) -> bool {
    let n = poly.len();
    let mut inside = false;
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        if cross2(a, b, p).abs() <= 1e-12 * (1.0 + a[0].abs() + a[1].abs() + b[0].abs() + b[1].abs())
            && p[0] >= a[0].min(b[0]) - 1e-12
            && p[0] <= a[0].max(b[0]) + 1e-12
            && p[1] >= a[1].min(b[1]) - 1e-12
            && p[1] <= a[1].max(b[1]) + 1e-12
        {
            return true;
        }
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = a[0] + (p[1] - a[1]) / (b[1] - a[1]) * (b[0] - a[0]);
            if p[0] < x {
                inside = !inside;
            }
        }
    }
    inside
}

/// Ear-clipping triangulation of a simple polygon; triangles are
/// counter-clockwise.
pub fn triangulate(poly: &[[f64; 2]]) -> Vec<[usize; 3]> {
    let mut idx: Vec<usize> = (0..poly.len()).collect();
    if signed_area2(poly) < 0.0 {
        idx.reverse();
    }
    let mut out = Vec::new();
    let mut guard = 0;
    while idx.len() > 3 && guard < 10 * poly.len() * poly.len() {
        guard += 1;
        let n = idx.len();
        let mut clipped = false;
        for k in 0..n {
            let (ia, ib, ic) = (idx[(k + n - 1) % n], idx[k], idx[(k + 1) % n]);
            let (a, b, c) = (poly[ia], poly[ib], poly[ic]);
            if cross2(a, b, c) <= 0.0 {
                continue;
            }
            let blocked = idx.iter().any(|&j| {
                j != ia && j != ib && j != ic && {
                    let p = poly[j];
                    cross2(a, b, p) >= 0.0 && cross2(b, c, p) >= 0.0 && cross2(c, a, p) >= 0.0
                }
            });
            if blocked {
                continue;
            }
            out.push([ia, ib, ic]);
            idx.remove(k);
            clipped = true;
            break;
        }
        if !clipped {
            break;
        }
    }
    if idx.len() == 3 {
        out.push([idx[0], idx[1], idx[2]]);
    }
    out
}

/// Vertical prism with a yawed rectangular footprint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prism {
    pub center: [f64; 2],
    pub yaw: f64,
    pub half: [f64; 2],
    pub z_min: f64,
    pub z_max: f64,
}

impl Prism {
    fn to_local(&self, x: f64, y: f64) -> [f64; 2] {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (x - self.center[0], y - self.center[1]);
        [c * dx + s * dy, -s * dx + c * dy]
    }

    pub fn contains_xy(&self, x: f64, y: f64) -> bool {
        let l = self.to_local(x, y);
        l[0].abs() <= self.half[0] && l[1].abs() <= self.half[1]
    }

    fn corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let [hx, hy] = self.half;
        [[-hx, -hy], [hx, -hy], [hx, hy], [-hx, hy]]
            .map(|[u, v]| [self.center[0] + c * u - s * v, self.center[1] + s * u + c * v])
    }

    /// Entry parameter of the ray `o + t d` for `t` in `[t_min, t_max]`.
    fn intersect(&self, o: &Point3<f64>, d: &Vector3<f64>, t_min: f64, t_max: f64) -> Option<f64> {
        let (s, c) = self.yaw.sin_cos();
        let lo = self.to_local(o.x, o.y);
        let ld = [c * d.x + s * d.y, -s * d.x + c * d.y];
        let lo3 = [lo[0], lo[1], o.z - 0.5 * (self.z_min + self.z_max)];
        let ld3 = [ld[0], ld[1], d.z];
        let h3 = [self.half[0], self.half[1], 0.5 * (self.z_max - self.z_min)];
        let (mut t0, mut t1) = (t_min, t_max);
        for k in 0..3 {
            if ld3[k] == 0.0 {
                if lo3[k].abs() > h3[k] {
                    return None;
                }
                continue;
            }
            let a = (-h3[k] - lo3[k]) / ld3[k];
            let b = (h3[k] - lo3[k]) / ld3[k];
            let (a, b) = if a < b { (a, b) } else { (b, a) };
            t0 = t0.max(a);
            t1 = t1.min(b);
            if t0 > t1 {
                return None;
            }
        }
        Some(t0)
    }
}

/// A scene compiled into floor patches and prisms, with its surface mesh.
#[derive(Debug, Clone)]
pub struct Scene {
    spec: SceneSpec,
    prisms: Vec<Prism>,
    mesh: TriMesh,
}

pub fn build_scene(spec: &SceneSpec) -> Result<Scene, SimError> {
    spec.validate()?;
    let mut prisms = Vec::new();
    for w in &spec.walls {
        let (a, b) = (Vector2::from(w.from), Vector2::from(w.to));
        let m = (a + b) * 0.5;
        let dir = b - a;
        prisms.push(Prism {
            center: [m.x, m.y],
            yaw: dir.y.atan2(dir.x),
            half: [0.5 * dir.norm(), 0.5 * w.thickness],
            z_min: w.base_z,
            z_max: w.base_z + w.height,
        });
    }
    for s in &spec.staircases {
        let (sn, cs) = s.yaw.sin_cos();
        for k in 0..s.steps {
            let u = (k as f64 + 0.5) * s.tread;
            prisms.push(Prism {
                center: [s.origin[0] + cs * u, s.origin[1] + sn * u],
                yaw: s.yaw,
                half: [0.5 * s.tread, 0.5 * s.width],
                z_min: s.base_z,
                z_max: s.base_z + (k + 1) as f64 * s.riser,
            });
        }
    }
    for b in &spec.obstacles {
        prisms.push(Prism {
            center: [0.5 * (b.min[0] + b.max[0]), 0.5 * (b.min[1] + b.max[1])],
            yaw: 0.0,
            half: [0.5 * (b.max[0] - b.min[0]), 0.5 * (b.max[1] - b.min[1])],
            z_min: b.min[2],
            z_max: b.max[2],
        });
    }
    let mesh = scene_mesh(spec, &prisms)?;
    Ok(Scene { spec: spec.clone(), prisms, mesh })
}

fn scene_mesh(spec: &SceneSpec, prisms: &[Prism]) -> Result<TriMesh, SimError> {
    let mut v: Vec<Point3<f64>> = Vec::new();
    let mut t: Vec<[usize; 3]> = Vec::new();
    for r in &spec.rooms {
        let base = v.len();
        v.extend(r.polygon.iter().map(|p| Point3::new(p[0], p[1], r.floor_z)));
        t.extend(triangulate(&r.polygon).into_iter().map(|[a, b, c]| [base + a, base + b, base + c]));
    }
    for p in prisms {
        let base = v.len();
        let c = p.corners();
        v.extend(c.iter().map(|q| Point3::new(q[0], q[1], p.z_min)));
        v.extend(c.iter().map(|q| Point3::new(q[0], q[1], p.z_max)));
        // Top, bottom, then four outward sides.
        t.push([base + 4, base + 5, base + 6]);
        t.push([base + 4, base + 6, base + 7]);
        t.push([base, base + 2, base + 1]);
        t.push([base, base + 3, base + 2]);
        for i in 0..4 {
            let j = (i + 1) % 4;
            t.push([base + i, base + j, base + 4 + j]);
            t.push([base + i, base + 4 + j, base + 4 + i]);
        }
    }
    TriMesh::new(v, t).map_err(|e| SimError::Scene(e.to_string()))
}

impl Scene {
    pub fn spec(&self) -> &SceneSpec {
        &self.spec
    }

    pub fn mesh(&self) -> &TriMesh {
        &self.mesh
    }

    pub fn prisms(&self) -> &[Prism] {
        &self.prisms
    }

    pub fn rooms(&self) -> &[RoomSpec] {
        &self.spec.rooms
    }

    /// Highest surface at `(x, y)`.
    pub fn height_at(&self, x: f64, y: f64) -> Option<f64> {
        self.height_below(x, y, f64::INFINITY)
    }

    /// Highest surface at `(x, y)` whose top is not above `z_ref`.
    pub fn height_below(&self, x: f64, y: f64, z_ref: f64) -> Option<f64> {
        let floors = self
            .spec
            .rooms
            .iter()
            .filter(|r| r.floor_z <= z_ref && polygon_contains(&r.polygon, [x, y]))
            .map(|r| r.floor_z);
        let tops = self.prisms.iter().filter(|p| p.z_max <= z_ref && p.contains_xy(x, y)).map(|p| p.z_max);
        floors.chain(tops).reduce(f64::max)
    }

    /// Whether `(x, y)` lies on a prism taller than `min_height` above the
    /// floor below it.
    pub fn is_obstacle(&self, x: f64, y: f64, min_height: f64) -> bool {
        self.prisms.iter().any(|p| p.contains_xy(x, y) && p.z_max - p.z_min > min_height)
    }

    /// Nearest hit parameter of `o + t d` in `(t_min, t_max]`.
    pub fn raycast(&self, o: &Point3<f64>, d: &Vector3<f64>, t_min: f64, t_max: f64) -> Option<f64> {
        let mut best: Option<f64> = None;
        let mut hi = t_max;
        if d.z != 0.0 {
            for r in &self.spec.rooms {
                let t = (r.floor_z - o.z) / d.z;
                if t > t_min && t <= hi && polygon_contains(&r.polygon, [o.x + t * d.x, o.y + t * d.y]) {
                    best = Some(t);
                    hi = t;
                }
            }
        }
        for p in &self.prisms {
            if let Some(t) = p.intersect(o, d, t_min, hi) {
                if t > t_min && t <= hi {
                    best = Some(t);
                    hi = t;
                }
            }
        }
        best
    }

    /// Index of the room containing `(x, y)` on the floor level of `z`.
    pub fn room_at(&self, x: f64, y: f64, z: f64) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, r) in self.spec.rooms.iter().enumerate() {
            if r.floor_z <= z + 0.05 && polygon_contains(&r.polygon, [x, y]) && best.map_or(true, |b| r.floor_z > b.1)
            {
                best = Some((i, r.floor_z));
            }
        }
        best.map(|b| b.0)
    }

    /// Mesh with downward-facing triangles removed, used as the surface
    /// seen by an external scanner. `keep` filters triangles by centroid.
    pub fn visible_surface(&self, keep: impl Fn(&Point3<f64>) -> bool) -> TriMesh {
        let m = &self.mesh;
        let tris: Vec<[usize; 3]> = (0..m.triangles().len())
            .filter(|&i| {
                let [a, b, c] = m.corners(i);
                let n = (b - a).cross(&(c - a));
                n.z >= -1e-12 * n.norm() && keep(&Point3::from((a.coords + b.coords + c.coords) / 3.0))
            })
            .map(|i| m.triangles()[i])
            .collect();
        TriMesh::new(m.vertices().to_vec(), tris).expect("subset of a valid mesh")
    }
}

/// Brute-force ray/mesh intersection (Möller-Trumbore), nearest `t > 0`.
pub fn raycast_mesh(mesh: &TriMesh, o: &Point3<f64>, d: &Vector3<f64>) -> Option<f64> {
    let mut best: Option<f64> = None;
    for i in 0..mesh.triangles().len() {
        let [a, b, c] = mesh.corners(i);
        let (e1, e2) = (b - a, c - a);
        let p = d.cross(&e2);
        let det = e1.dot(&p);
        if det.abs() < 1e-15 {
            continue;
        }
        let inv = 1.0 / det;
        let s = o - a;
        let u = s.dot(&p) * inv;
        if !(-1e-12..=1.0 + 1e-12).contains(&u) {
            continue;
        }
        let q = s.cross(&e1);
        let v = d.dot(&q) * inv;
        if v < -1e-12 || u + v > 1.0 + 1e-12 {
            continue;
        }
        let t = e2.dot(&q) * inv;
        if t > 0.0 && best.map_or(true, |b| t < b) {
            best = Some(t);
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GaitConfig {
    pub speed: f64,
    pub step_frequency: f64,
    /// Thigh pitch oscillation amplitude in radians.
    pub pitch_amplitude: f64,
    /// Vertical bob amplitude in meters.
    pub bob_amplitude: f64,
    /// Foot-strike acceleration spike magnitude in m/s². Reported by
    /// `foot_strike_acceleration`, not applied to poses.
    pub impulse_amplitude: f64,
    /// Height of the thigh frame above the ground.
    pub thigh_height: f64,
    /// Camera position in the thigh frame (x forward, y left, z up).
    pub mount_translation: [f64; 3],
    /// Downward tilt of the optical axis in radians.
    pub mount_tilt: f64,
    /// Chord half-length used to smooth heading at corners.
    pub heading_lookahead: f64,
}

impl Default for GaitConfig {
    fn default() -> Self {
        Self {
            speed: 0.5,
            step_frequency: 1.0,
            pitch_amplitude: 0.1,
            bob_amplitude: 0.02,
            impulse_amplitude: 30.0,
            thigh_height: 0.55,
            mount_translation: [0.1, 0.0, 0.0],
            mount_tilt: 0.6,
            heading_lookahead: 0.4,
        }
    }
}

impl GaitConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let ok = self.speed > 0.0
            && self.step_frequency > 0.0
            && self.pitch_amplitude >= 0.0
            && self.bob_amplitude >= 0.0
            && self.impulse_amplitude >= 0.0
            && self.heading_lookahead > 0.0
            && self.thigh_height.is_finite()
            && self.mount_tilt.is_finite()
            && self.mount_translation.iter().all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(SimError::Gait(format!("{self:?}")))
        }
    }

    /// Camera pose in the thigh frame; the optical axis is +z.
    pub fn mount(&self) -> Pose {
        let body_from_cam = nalgebra::Rotation3::from_matrix_unchecked(nalgebra::Matrix3::new(
            0.0, 0.0, 1.0, //
            -1.0, 0.0, 0.0, //
            0.0, -1.0, 0.0,
        ));
        let tilt = UnitQuaternion::from_axis_angle(&Vector3::y_axis(), self.mount_tilt);
        Pose::from_parts(
            Translation3::from(Vector3::from(self.mount_translation)),
            tilt * UnitQuaternion::from_rotation_matrix(&body_from_cam),
        )
    }
}

/// Vertical acceleration spike at foot strikes, one per step.
pub fn foot_strike_acceleration(cfg: &GaitConfig, t: f64) -> f64 {
    let phase = (t * cfg.step_frequency).fract();
    let d = phase.min(1.0 - phase) / cfg.step_frequency;
    cfg.impulse_amplitude * (-(d / 0.02).powi(2)).exp()
}

fn polyline_at(pts: &[[f64; 3]], cum: &[f64], s: f64) -> Vector3<f64> {
    let s = s.clamp(0.0, *cum.last().unwrap());
    let k = cum.partition_point(|&c| c <= s).clamp(1, pts.len() - 1);
    let (a, b) = (Vector3::from(pts[k - 1]), Vector3::from(pts[k]));
    let len = cum[k] - cum[k - 1];
    let f = if len > 0.0 { (s - cum[k - 1]) / len } else { 0.0 };
    a + (b - a) * f
}

/// Camera poses along a polyline of `[x, y, ground_z]` waypoints.
pub fn generate_gait_trajectory(cfg: &GaitConfig, waypoints: &[[f64; 3]], dt: f64) -> Result<Trajectory, SimError> {
    cfg.validate()?;
    if waypoints.len() < 2 || !(dt > 0.0) {
        return Err(SimError::Gait("need two waypoints and positive dt".into()));
    }
    let mut cum = vec![0.0];
    for w in waypoints.windows(2) {
        let d = ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt();
        cum.push(cum.last().unwrap() + d);
    }
    let total = *cum.last().unwrap();
    if !(total > 0.0) {
        return Err(SimError::Gait("waypoints have zero horizontal length".into()));
    }
    let steps = (total / cfg.speed / dt).floor() as usize;
    let mount = cfg.mount();
    let omega = 2.0 * std::f64::consts::PI * cfg.step_frequency;
    let mut entries = Vec::with_capacity(steps + 1);
    for i in 0..=steps {
        let t = i as f64 * dt;
        let s = (cfg.speed * t).min(total);
        let p = polyline_at(waypoints, &cum, s);
        let ahead = polyline_at(waypoints, &cum, s + cfg.heading_lookahead);
        let behind = polyline_at(waypoints, &cum, s - cfg.heading_lookahead);
        let yaw = (ahead.y - behind.y).atan2(ahead.x - behind.x);
        let pitch = cfg.pitch_amplitude * (omega * t).sin();
        let z = p.z + cfg.thigh_height + cfg.bob_amplitude * (omega * t).sin();
        let rot = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw)
            * UnitQuaternion::from_axis_angle(&Vector3::y_axis(), pitch);
        let thigh = Pose::from_parts(Translation3::new(p.x, p.y, z), rot);
        entries.push((t, thigh * mount));
    }
    Trajectory::new(entries).map_err(|e| SimError::Gait(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub intrinsics: CameraIntrinsics,
    /// Depth noise standard deviation at 1 m; scales with range squared.
    pub noise_sigma: f64,
    pub max_range: f64,
    /// Render every `pixel_stride`-th pixel in both directions.
    pub pixel_stride: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            intrinsics: CameraIntrinsics { fx: 120.0, fy: 120.0, cx: 79.5, cy: 59.5, width: 160.0, height: 120.0 },
            noise_sigma: 0.005,
            max_range: 4.0,
            pixel_stride: 1,
        }
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Standard normal sample truncated to three standard deviations.
fn truncated_normal(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let n: f64 = rng.sample(StandardNormal);
        if n.abs() <= 3.0 {
            return n;
        }
    }
}

/// Raycast depth cloud in the sensor frame. Noise is applied along each ray
/// with standard deviation `noise_sigma * range^2`, truncated at 3 sigma.
pub fn render_depth_cloud(scene: &Scene, camera: &Pose, cfg: &RenderConfig, seed: u64, frame: u64) -> PointCloud {
    let k = &cfg.intrinsics;
    let mut rng = stream_rng(seed, frame);
    let o = Point3::from(camera.translation.vector);
    let stride = cfg.pixel_stride.max(1);
    let mut points = Vec::new();
    for v in (0..k.height as usize).step_by(stride) {
        for u in (0..k.width as usize).step_by(stride) {
            let b = Vector3::new((u as f64 - k.cx) / k.fx, (v as f64 - k.cy) / k.fy, 1.0);
            let d = camera.rotation * b;
            let bn = b.norm();
            let Some(t) = scene.raycast(&o, &d, 1e-6, cfg.max_range / bn) else {
                continue;
            };
            let range = t * bn;
            let noisy = if cfg.noise_sigma > 0.0 {
                range + truncated_normal(&mut rng) * cfg.noise_sigma * range * range
            } else {
                range
            };
            if noisy > 0.0 {
                points.push(Point3::from(b * (noisy / bn)));
            }
        }
    }
    PointCloud::new(points, "sensor", 0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DriftConfig {
    /// Fractional translation scale error per meter traveled.
    pub scale_drift: f64,
    /// Yaw error in radians per meter traveled.
    pub yaw_drift: f64,
    /// White translation noise per step, meters per sqrt(meter).
    pub translation_noise: f64,
    /// White yaw noise per step, radians per sqrt(meter).
    pub yaw_noise: f64,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for DriftConfig {
    fn default() -> Self {
        Self { scale_drift: 0.04, yaw_drift: 0.0, translation_noise: 0.0, yaw_noise: 0.0, seed: 0 }
    }
}

impl DriftConfig {
    pub fn zero() -> Self {
        Self { scale_drift: 0.0, yaw_drift: 0.0, translation_noise: 0.0, yaw_noise: 0.0, seed: 0 }
    }

    pub fn is_zero(&self) -> bool {
        self.scale_drift == 0.0 && self.yaw_drift == 0.0 && self.translation_noise == 0.0 && self.yaw_noise == 0.0
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let ok = [self.scale_drift, self.yaw_drift, self.translation_noise, self.yaw_noise]
            .iter()
            .all(|v| *v >= 0.0 && v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(SimError::Config(format!("drift values must be non-negative: {self:?}")))
        }
    }
}

/// Re-integrates ground-truth increments with scale and yaw drift plus
/// seeded noise. The zero configuration returns the input unchanged.
pub fn corrupt_odometry(gt: &Trajectory, cfg: &DriftConfig) -> Trajectory {
    if cfg.is_zero() || gt.len() < 2 {
        return gt.clone();
    }
    let mut rng = stream_rng(cfg.seed, 0x0d0);
    let e = gt.entries();
    let mut out = vec![e[0]];
    let mut cur = e[0].1;
    for w in e.windows(2) {
        let rel = w[0].1.inverse() * w[1].1;
        let dist = rel.translation.vector.norm();
        let mut t = rel.translation.vector * (1.0 + cfg.scale_drift);
        if cfg.translation_noise > 0.0 {
            let n = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
            t += n * cfg.translation_noise * dist.sqrt();
        }
        let mut yaw = cfg.yaw_drift * dist;
        if cfg.yaw_noise > 0.0 {
            yaw += rng.sample::<f64, _>(StandardNormal) * cfg.yaw_noise * dist.sqrt();
        }
        cur = cur * Pose::from_parts(Translation3::from(t), rel.rotation);
        cur.rotation = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw) * cur.rotation;
        out.push((w[1].0, cur));
    }
    Trajectory::new(out).expect("stamps copied from a valid trajectory")
}

/// Surface points with fixed random descriptors.
#[derive(Debug, Clone, PartialEq)]
pub struct Landmarks {
    pub points: Vec<Point3<f64>>,
    pub descriptors: Vec<Descriptor>,
}

/// Seeded landmarks on the upward and sideways faces of the scene.
pub fn generate_landmarks(scene: &Scene, density: f64, seed: u64) -> Result<Landmarks, SimError> {
    let surface = scene.visible_surface(|_| true);
    let cloud = crate::evaluation::sample_mesh(&surface, density, seed, None)
        .map_err(|e| SimError::Config(e.to_string()))?;
    let mut rng = stream_rng(seed, 0x1a4d);
    let descriptors = (0..cloud.len())
        .map(|_| {
            let mut d = [0u8; 32];
            rng.fill(&mut d);
            d
        })
        .collect();
    Ok(Landmarks { points: cloud.points, descriptors })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KeyframeNoise {
    pub pixel_sigma: f64,
    pub bit_flip_rate: f64,
    pub max_range: f64,
}

impl Default for KeyframeNoise {
    fn default() -> Self {
        Self { pixel_sigma: 0.5, bit_flip_rate: 0.05, max_range: 6.0 }
    }
}

/// Projects visible landmarks into a synthetic keyframe.
pub fn synth_keyframe(
    scene: &Scene,
    camera: &Pose,
    intrinsics: &CameraIntrinsics,
    landmarks: &Landmarks,
    noise: &KeyframeNoise,
    node_id: usize,
    seed: u64,
) -> Keyframe {
    let mut rng = stream_rng(seed, 0x4b46_0000 + node_id as u64);
    let inv = camera.inverse();
    let o = Point3::from(camera.translation.vector);
    let mut kf = Keyframe {
        node_id,
        intrinsics: *intrinsics,
        keypoints: Vec::new(),
        descriptors: Vec::new(),
        depths: Vec::new(),
    };
    for (p, desc) in landmarks.points.iter().zip(&landmarks.descriptors) {
        let pc = inv * p;
        if pc.z < 0.1 {
            continue;
        }
        let dist = (p - o).norm();
        if dist > noise.max_range {
            continue;
        }
        let Some(uv) = intrinsics.project(&pc) else { continue };
        if !intrinsics.in_image(&uv) {
            continue;
        }
        let d = (p - o) / dist;
        if let Some(t) = scene.raycast(&o, &d, 1e-6, dist + 1e-6) {
            if t < dist - 1e-6 * (1.0 + dist) {
                continue;
            }
        }
        let mut kp = uv;
        if noise.pixel_sigma > 0.0 {
            kp.x += rng.sample::<f64, _>(StandardNormal) * noise.pixel_sigma;
            kp.y += rng.sample::<f64, _>(StandardNormal) * noise.pixel_sigma;
        }
        let mut dsc = *desc;
        if noise.bit_flip_rate > 0.0 {
            for byte in dsc.iter_mut() {
                for bit in 0..8 {
                    if rng.gen::<f64>() < noise.bit_flip_rate {
                        *byte ^= 1 << bit;
                    }
                }
            }
        }
        kf.keypoints.push(kp);
        kf.descriptors.push(dsc);
        kf.depths.push(pc.z);
    }
    kf
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabelConfig {
    /// Mass spread uniformly over the other classes.
    pub epsilon: f64,
    pub mislabel_rate: f64,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self { epsilon: 0.05, mislabel_rate: 0.0, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeLabel {
    /// Ground-truth room index; `None` outside every room.
    pub room: Option<usize>,
    pub distribution: Vec<(String, f64)>,
    pub mislabeled: bool,
}

impl NodeLabel {
    pub fn top_class(&self) -> &str {
        let mut best = &self.distribution[0];
        for e in &self.distribution[1..] {
            if e.1 > best.1 {
                best = e;
            }
        }
        &best.0
    }
}

/// Room classes in first-appearance order followed by the fallback class.
pub fn room_classes(rooms: &[RoomSpec]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for r in rooms {
        if !out.contains(&r.class) {
            out.push(r.class.clone());
        }
    }
    if !out.iter().any(|c| c == FALLBACK_CLASS) {
        out.push(FALLBACK_CLASS.into());
    }
    out
}

/// Label distribution per position: `1 - epsilon` on the containing room's
/// class, with seeded mislabels drawn from the other classes.
pub fn label_rooms(scene: &Scene, positions: &[Point3<f64>], cfg: &LabelConfig) -> Result<Vec<NodeLabel>, SimError> {
    if !(0.0..1.0).contains(&cfg.epsilon) || !(0.0..=1.0).contains(&cfg.mislabel_rate) {
        return Err(SimError::Config("epsilon must be in [0,1) and mislabel_rate in [0,1]".into()));
    }
    let classes = room_classes(scene.rooms());
    let n = classes.len();
    let mut rng = stream_rng(cfg.seed, 0x1abe1);
    let mut out = Vec::with_capacity(positions.len());
    for p in positions {
        let room = scene.room_at(p.x, p.y, p.z);
        let truth = match room {
            Some(i) => &scene.rooms()[i].class,
            None => FALLBACK_CLASS,
        };
        let mut k = classes.iter().position(|c| c == truth).expect("class list covers rooms");
        let flip: f64 = rng.gen();
        let pick: f64 = rng.gen();
        let mislabeled = n > 1 && flip < cfg.mislabel_rate;
        if mislabeled {
            let other = ((pick * (n - 1) as f64) as usize).min(n - 2);
            k = if other >= k { other + 1 } else { other };
        }
        let rest = if n > 1 { cfg.epsilon / (n - 1) as f64 } else { 0.0 };
        let distribution = classes
            .iter()
            .enumerate()
            .map(|(j, c)| (c.clone(), if j == k { if n > 1 { 1.0 - cfg.epsilon } else { 1.0 } } else { rest }))
            .collect();
        out.push(NodeLabel { room, distribution, mislabeled });
    }
    Ok(out)
}

/// Axis-aligned rectangle as a counter-clockwise polygon.
pub fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Vec<[f64; 2]> {
    vec![[x0, y0], [x1, y0], [x1, y1], [x0, y1]]
}

/// Walls along the edges of a rectangle, leaving the listed gaps open.
/// Each gap is `(edge, from, to)` with edge 0..4 counter-clockwise from
/// the bottom and offsets measured along the edge.
pub fn rect_walls(x0: f64, y0: f64, x1: f64, y1: f64, height: f64, base_z: f64, gaps: &[(usize, f64, f64)]) -> Vec<WallSpec> {
    let corners = [[x0, y0], [x1, y0], [x1, y1], [x0, y1]];
    let mut out = Vec::new();
    for e in 0..4 {
        let (a, b) = (Vector2::from(corners[e]), Vector2::from(corners[(e + 1) % 4]));
        let len = (b - a).norm();
        let dir = (b - a) / len;
        let mut cuts: Vec<(f64, f64)> = gaps.iter().filter(|g| g.0 == e).map(|g| (g.1, g.2)).collect();
        cuts.sort_by(|p, q| p.0.total_cmp(&q.0));
        let mut s = 0.0;
        for (g0, g1) in cuts.into_iter().chain(std::iter::once((len, len))) {
            if g0 > s {
                let (p, q) = (a + dir * s, a + dir * g0);
                out.push(WallSpec { from: [p.x, p.y], to: [q.x, q.y], height, thickness: 0.1, base_z });
            }
            s = s.max(g1);
        }
    }
    out
}

/// Straight-line distance traveled by a trajectory between two indices.
pub fn traveled(traj: &Trajectory, from: usize, to: usize) -> f64 {
    traj.entries()[from..=to]
        .windows(2)
        .map(|w| (w[1].1.translation.vector - w[0].1.translation.vector).norm())
        .sum()
}

/// Ground-truth position of every entry.
pub fn positions(traj: &Trajectory) -> Vec<Point3<f64>> {
    traj.poses().map(|p| Point3::from(p.translation.vector)).collect()
}

/// Rotation rate between consecutive poses in rad/s.
pub fn angular_rates(traj: &Trajectory) -> Vec<f64> {
    traj.entries()
        .windows(2)
        .map(|w| se3::rotation_angle(&(w[0].1.inverse() * w[1].1)) / (w[1].0 - w[0].0))
        .collect()
}
