//! Relocalization against a keyframe map: descriptor retrieval, RANSAC
//! perspective-n-point, fix verification, and the map/odometry correction.
//!
//! Cameras follow the usual pinhole convention: `+z` forward, `+x` right,
//! `+y` down. Poses named `*_pose` are camera-in-map transforms.

use std::collections::BTreeSet;
use std::io::{Read, Write};

use nalgebra::{Complex, Matrix2x6, Matrix3, Matrix4, Matrix6, Point3, Vector2, Vector3, Vector6};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::posegraph::FactorKind;
use crate::se3::{self, Pose};

pub type Descriptor = [u8; 32];

#[derive(Debug, Error)]
pub enum LocalizationError {
    #[error("invalid camera intrinsics: {0}")]
    Intrinsics(String),
    #[error("keyframe lists have mismatched lengths")]
    KeyframeShape,
    #[error("the keyframe map is empty")]
    EmptyMap,
    #[error("at least 4 correspondences are required, got {0}")]
    TooFewPoints(usize),
    #[error("no consensus: best hypothesis had {best} inliers, {required} required")]
    NoConsensus { best: usize, required: usize },
    #[error("fix stamp {fix} and odometry stamp {odom} differ by more than {window} s")]
    StaleFix { fix: f64, odom: f64, window: f64 },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed keyframe file: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<(), LocalizationError> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.width > 0.0
            && self.height > 0.0
            && (0.0..=self.width).contains(&self.cx)
            && (0.0..=self.height).contains(&self.cy);
        if ok {
            Ok(())
        } else {
            Err(LocalizationError::Intrinsics(format!("{self:?}")))
        }
    }

    /// Pixel of a camera-frame point; `None` behind the camera.
    pub fn project(&self, p: &Point3<f64>) -> Option<Vector2<f64>> {
        (p.z > 0.0).then(|| Vector2::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }

    pub fn in_image(&self, uv: &Vector2<f64>) -> bool {
        uv.x >= 0.0 && uv.y >= 0.0 && uv.x < self.width && uv.y < self.height
    }

    /// Camera-frame point at z-depth `depth` behind pixel `uv`.
    pub fn unproject(&self, uv: &Vector2<f64>, depth: f64) -> Point3<f64> {
        Point3::new((uv.x - self.cx) / self.fx * depth, (uv.y - self.cy) / self.fy * depth, depth)
    }

    pub fn bearing(&self, uv: &Vector2<f64>) -> Vector3<f64> {
        Vector3::new((uv.x - self.cx) / self.fx, (uv.y - self.cy) / self.fy, 1.0).normalize()
    }
}

/// Keypoints, binary descriptors and depths stored at a graph node.
#[derive(Debug, Clone, PartialEq)]
pub struct Keyframe {
    pub node_id: usize,
    pub intrinsics: CameraIntrinsics,
    pub keypoints: Vec<Vector2<f64>>,
    pub descriptors: Vec<Descriptor>,
    /// z-depth in meters; NaN when unknown.
    pub depths: Vec<f64>,
}

impl Keyframe {
    pub fn validate(&self) -> Result<(), LocalizationError> {
        self.intrinsics.validate()?;
        let n = self.keypoints.len();
        if self.descriptors.len() != n || self.depths.len() != n {
            return Err(LocalizationError::KeyframeShape);
        }
        if self.depths.iter().any(|d| !d.is_nan() && !(*d > 0.0 && d.is_finite())) {
            return Err(LocalizationError::KeyframeShape);
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence2D3D {
    pub image_point: Vector2<f64>,
    pub world_point: Point3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalizationFix {
    pub matched_node: usize,
    pub pose: Pose,
    pub inlier_count: usize,
    pub mean_reprojection_error: f64,
    pub stamp: f64,
}

#[inline]
pub fn hamming(a: &Descriptor, b: &Descriptor) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchParams {
    /// Lowe ratio between best and second-best distance.
    pub ratio: f64,
    /// Hamming distance cap in bits.
    pub max_distance: u32,
}

impl Default for MatchParams {
    fn default() -> Self {
        Self { ratio: 0.8, max_distance: 64 }
    }
}

fn best_two(d: &Descriptor, set: &[Descriptor]) -> Option<(usize, u32, u32)> {
    let mut best: Option<(usize, u32)> = None;
    let mut second = u32::MAX;
    for (j, e) in set.iter().enumerate() {
        let h = hamming(d, e);
        match best {
            Some((_, b)) if h >= b => second = second.min(h),
            Some((_, b)) => {
                second = b;
                best = Some((j, h));
            }
            None => best = Some((j, h)),
        }
    }
    best.map(|(j, b)| (j, b, second))
}

/// Mutual nearest-neighbour matches `(index in a, index in b)` passing the cap and ratio test.
pub fn match_descriptors(a: &[Descriptor], b: &[Descriptor], params: &MatchParams) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (i, d) in a.iter().enumerate() {
        let Some((j, best, second)) = best_two(d, b) else { continue };
        if best > params.max_distance {
            continue;
        }
        if second != u32::MAX && (best as f64) >= params.ratio * second as f64 {
            continue;
        }
        if let Some((back, _, _)) = best_two(&b[j], a) {
            if back == i {
                out.push((i, j));
            }
        }
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalParams {
    pub matching: MatchParams,
    /// When set, only these nodes are considered (e.g. nodes of the predicted room class).
    pub node_filter: Option<BTreeSet<usize>>,
}

/// Up to `k` map nodes ranked by match count, ties broken by ascending node id.
///
/// Nodes with no matches are left out, so the list may be shorter than `k`.
pub fn retrieve_candidates(
    query: &Keyframe,
    map: &[Keyframe],
    k: usize,
    params: &RetrievalParams,
) -> Result<Vec<(usize, usize)>, LocalizationError> {
    if map.is_empty() {
        return Err(LocalizationError::EmptyMap);
    }
    let mut scored: Vec<(usize, usize)> = map
        .iter()
        .filter(|kf| params.node_filter.as_ref().map_or(true, |f| f.contains(&kf.node_id)))
        .map(|kf| (kf.node_id, match_descriptors(&query.descriptors, &kf.descriptors, &params.matching).len()))
        .filter(|(_, s)| *s > 0)
        .collect();
    scored.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(scored)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PnpConfig {
    pub iterations: usize,
    /// Pixels.
    pub reprojection_threshold: f64,
    pub min_inliers: usize,
    pub seed: u64,
}

impl Default for PnpConfig {
    fn default() -> Self {
        Self { iterations: 500, reprojection_threshold: 3.0, min_inliers: 15, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PnpResult {
    /// Camera-in-map pose.
    pub pose: Pose,
    pub inliers: Vec<bool>,
    pub inlier_count: usize,
    pub mean_reprojection_error: f64,
}

/// Reprojection error of `c` under world-to-camera `t_cw`; infinite behind the camera.
pub fn reprojection_error(t_cw: &Pose, k: &CameraIntrinsics, c: &Correspondence2D3D) -> f64 {
    match k.project(&(t_cw * c.world_point)) {
        Some(uv) => (uv - c.image_point).norm(),
        None => f64::INFINITY,
    }
}

/// Rigid `R, t` minimizing `sum |dst - (R src + t)|^2`.
fn kabsch(src: &[Point3<f64>], dst: &[Point3<f64>]) -> Option<Pose> {
    let n = src.len() as f64;
    let cs = src.iter().map(|p| p.coords).sum::<Vector3<f64>>() / n;
    let cd = dst.iter().map(|p| p.coords).sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (s.coords - cs) * (d.coords - cd).transpose();
    }
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u?, svd.v_t?);
    let v = vt.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let r = v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * u.transpose();
    let rot = nalgebra::UnitQuaternion::from_matrix(&r);
    let t = cd - rot * cs;
    Some(Pose::from_parts(t.into(), rot))
}

/// Real roots of `c[0] x^4 + c[1] x^3 + c[2] x^2 + c[3] x + c[4]`.
fn quartic_roots(c: [f64; 5]) -> Vec<f64> {
    let scale = c.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 || c[0].abs() < 1e-12 * scale {
        return Vec::new();
    }
    let b: Vec<f64> = c.iter().map(|v| v / c[0]).collect();
    let comp = Matrix4::new(-b[1], -b[2], -b[3], -b[4], 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0);
    let f = |x: f64| (((b[1] + x) * x + b[2]) * x + b[3]) * x + b[4];
    let df = |x: f64| ((4.0 * x + 3.0 * b[1]) * x + 2.0 * b[2]) * x + b[3];
    let eigen: Vec<Complex<f64>> = match nalgebra::linalg::Schur::try_new(comp, f64::EPSILON, 500) {
        Some(schur) => schur.complex_eigenvalues().iter().copied().collect(),
        None => durand_kerner(&b),
    };
    let mut roots = Vec::new();
    for z in &eigen {
        if z.im.abs() > 1e-4 * (1.0 + z.re.abs()) {
            continue;
        }
        let mut x = z.re;
        for _ in 0..8 {
            let d = df(x);
            if d == 0.0 {
                break;
            }
            let step = f(x) / d;
            x -= step;
            if step.abs() <= 1e-15 * (1.0 + x.abs()) {
                break;
            }
        }
        if x.is_finite() {
            roots.push(x);
        }
    }
    roots
}

/// Simultaneous root iteration for a monic quartic `x^4 + b1 x^3 + b2 x^2 + b3 x + b4`.
fn durand_kerner(b: &[f64]) -> Vec<Complex<f64>> {
    let p = |z: Complex<f64>| (((z + b[1]) * z + b[2]) * z + b[3]) * z + b[4];
    let radius = 1.0 + b[1..].iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let seed = Complex::new(0.4, 0.9);
    let mut z: Vec<Complex<f64>> = (0..4).map(|k| seed.powu(k as u32) * radius).collect();
    for _ in 0..500 {
        let mut moved = 0.0f64;
        for i in 0..4 {
            let mut den = Complex::new(1.0, 0.0);
            for j in 0..4 {
                if i != j {
                    den *= z[i] - z[j];
                }
            }
            if den.norm() == 0.0 {
                continue;
            }
            let step = p(z[i]) / den;
            z[i] -= step;
            moved = moved.max(step.norm());
        }
        if moved < 1e-14 * radius {
            break;
        }
    }
    z
}

/// Grunert's three-point solution; returns world-to-camera candidates.
fn p3p(world: &[Point3<f64>; 3], f: &[Vector3<f64>; 3]) -> Vec<Pose> {
    let a2 = (world[1] - world[2]).norm_squared();
    let b2 = (world[0] - world[2]).norm_squared();
    let c2 = (world[0] - world[1]).norm_squared();
    let ca = f[1].dot(&f[2]);
    let cb = f[0].dot(&f[2]);
    let cg = f[0].dot(&f[1]);
    let amc = (a2 - c2) / b2;
    let apc = (a2 + c2) / b2;
    let bmc = (b2 - c2) / b2;
    let bma = (b2 - a2) / b2;
    let c2b2 = c2 / b2;
    let a2b2 = a2 / b2;
    let coeffs = [
        (amc - 1.0).powi(2) - 4.0 * c2b2 * ca * ca,
        4.0 * (amc * (1.0 - amc) * cb - (1.0 - apc) * ca * cg + 2.0 * c2b2 * ca * ca * cb),
        2.0 * (amc * amc - 1.0 + 2.0 * amc * amc * cb * cb + 2.0 * bmc * ca * ca - 4.0 * apc * ca * cb * cg
            + 2.0 * bma * cg * cg),
        4.0 * (-amc * (1.0 + amc) * cb + 2.0 * a2b2 * cg * cg * cb - (1.0 - apc) * ca * cg),
        (1.0 + amc).powi(2) - 4.0 * a2b2 * cg * cg,
    ];
    let mut out = Vec::new();
    for v in quartic_roots(coeffs) {
        let den = 2.0 * (cg - v * ca);
        if den.abs() < 1e-12 {
            continue;
        }
        let u = ((-1.0 + amc) * v * v - 2.0 * amc * cb * v + 1.0 + amc) / den;
        let q = 1.0 + u * u - 2.0 * u * cg;
        if !(q > 0.0) {
            continue;
        }
        let s1 = (c2 / q).sqrt();
        let s = [s1, u * s1, v * s1];
        if s.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
            continue;
        }
        let cam = [Point3::from(f[0] * s[0]), Point3::from(f[1] * s[1]), Point3::from(f[2] * s[2])];
        if let Some(p) = kabsch(world, &cam) {
            out.push(p);
        }
    }
    out
}

fn is_degenerate(p: &[Point3<f64>; 3]) -> bool {
    let e1 = p[1] - p[0];
    let e2 = p[2] - p[0];
    let scale = e1.norm_squared().max(e2.norm_squared()).max((p[2] - p[1]).norm_squared());
    !(scale > 0.0) || e1.cross(&e2).norm() < 1e-6 * scale
}

/// Damped Gauss-Newton on reprojection error over the world-to-camera pose.
fn refine(t_cw: Pose, k: &CameraIntrinsics, corr: &[Correspondence2D3D], mask: &[bool]) -> Pose {
    let cost = |t: &Pose| -> f64 {
        corr.iter()
            .zip(mask)
            .filter(|(_, m)| **m)
            .map(|(c, _)| match k.project(&(t * c.world_point)) {
                Some(uv) => (uv - c.image_point).norm_squared(),
                None => 1e12,
            })
            .sum()
    };
    let mut t = t_cw;
    let mut current = cost(&t);
    let mut lambda = 1e-6;
    for _ in 0..50 {
        if current == 0.0 {
            break;
        }
        let mut h = Matrix6::<f64>::zeros();
        let mut g = Vector6::<f64>::zeros();
        for (c, _) in corr.iter().zip(mask).filter(|(_, m)| **m) {
            let p = t * c.world_point;
            if p.z <= 0.0 {
                continue;
            }
            let iz = 1.0 / p.z;
            let r = Vector2::new(k.fx * p.x * iz + k.cx, k.fy * p.y * iz + k.cy) - c.image_point;
            let dproj = nalgebra::Matrix2x3::new(
                k.fx * iz,
                0.0,
                -k.fx * p.x * iz * iz,
                0.0,
                k.fy * iz,
                -k.fy * p.y * iz * iz,
            );
            let mut dp = nalgebra::Matrix3x6::zeros();
            dp.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
            dp.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-se3::hat(&p.coords)));
            let j: Matrix2x6<f64> = dproj * dp;
            h += j.transpose() * j;
            g += j.transpose() * r;
        }
        let mut improved = false;
        while lambda < 1e10 {
            let mut damped = h;
            for d in 0..6 {
                damped[(d, d)] += lambda * h[(d, d)].max(1e-9);
            }
            let Some(chol) = damped.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let delta = chol.solve(&(-g));
            let cand = se3::exp(&delta) * t;
            let c = cost(&cand);
            if c < current {
                let rel = (current - c) / current;
                t = cand;
                current = c;
                lambda = (lambda * 0.1).max(1e-12);
                improved = rel > 1e-15 && delta.norm() > 1e-15;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    t
}

fn consensus(t_cw: &Pose, k: &CameraIntrinsics, corr: &[Correspondence2D3D], thr: f64) -> (Vec<bool>, usize, f64) {
    let mut mask = vec![false; corr.len()];
    let mut n = 0;
    let mut sum = 0.0;
    for (m, c) in mask.iter_mut().zip(corr) {
        let e = reprojection_error(t_cw, k, c);
        if e <= thr {
            *m = true;
            n += 1;
            sum += e;
        }
    }
    (mask, n, sum)
}

/// RANSAC over minimal four-point samples, then least-squares refinement on the inliers.
///
/// Each sample is solved with the three-point method on its first three points; the fourth
/// selects among the up to four solutions. Samples with nearly collinear world points are
/// skipped and redrawn. After refinement the inlier set is recomputed under the final pose.
pub fn pnp_ransac(
    corr: &[Correspondence2D3D],
    k: &CameraIntrinsics,
    cfg: &PnpConfig,
) -> Result<PnpResult, LocalizationError> {
    k.validate()?;
    if corr.len() < 4 {
        return Err(LocalizationError::TooFewPoints(corr.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let bearings: Vec<Vector3<f64>> = corr.iter().map(|c| k.bearing(&c.image_point)).collect();
    let mut best: Option<(Pose, usize, f64)> = None;
    let mut drawn = 0;
    let mut attempts = 0;
    while drawn < cfg.iterations && attempts < cfg.iterations * 10 {
        attempts += 1;
        let idx = sample(&mut rng, corr.len(), 4).into_vec();
        let w = [corr[idx[0]].world_point, corr[idx[1]].world_point, corr[idx[2]].world_point];
        if is_degenerate(&w) {
            continue;
        }
        drawn += 1;
        let f = [bearings[idx[0]], bearings[idx[1]], bearings[idx[2]]];
        let check = &corr[idx[3]];
        let Some(model) = p3p(&w, &f)
            .into_iter()
            .map(|t| (reprojection_error(&t, k, check), t))
            .filter(|(e, _)| e.is_finite())
            .min_by(|a, b| a.0.partial_cmp(&b.0).expect("finite"))
            .map(|(_, t)| t)
        else {
            continue;
        };
        let (_, n, sum) = consensus(&model, k, corr, cfg.reprojection_threshold);
        let better = match &best {
            None => n > 0,
            Some((_, bn, bs)) => n > *bn || (n == *bn && sum < *bs),
        };
        if better {
            best = Some((model, n, sum));
            if n == corr.len() {
                break;
            }
        }
    }
    let Some((model, n, _)) = best else {
        return Err(LocalizationError::NoConsensus { best: 0, required: cfg.min_inliers.max(4) });
    };
    if n < cfg.min_inliers.max(4) {
        return Err(LocalizationError::NoConsensus { best: n, required: cfg.min_inliers.max(4) });
    }
    let (mask, _, _) = consensus(&model, k, corr, cfg.reprojection_threshold);
    let mut t = refine(model, k, corr, &mask);
    let (mut mask, mut n, mut sum) = consensus(&t, k, corr, cfg.reprojection_threshold);
    if n >= 4 {
        t = refine(t, k, corr, &mask);
        (mask, n, sum) = consensus(&t, k, corr, cfg.reprojection_threshold);
    }
    if n < cfg.min_inliers.max(4) {
        return Err(LocalizationError::NoConsensus { best: n, required: cfg.min_inliers.max(4) });
    }
    Ok(PnpResult { pose: t.inverse(), inliers: mask, inlier_count: n, mean_reprojection_error: sum / n as f64 })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerifyParams {
    pub matching: MatchParams,
    pub pnp: PnpConfig,
}

/// Matches `query` against `candidate`, lifts the candidate side to 3D and runs PnP.
///
/// Returns a fix when PnP reaches the inlier minimum with a mean reprojection
/// error within the threshold; otherwise `None`.
pub fn verify_and_fix(
    query: &Keyframe,
    stamp: f64,
    candidate: &Keyframe,
    candidate_pose: &Pose,
    params: &VerifyParams,
) -> Option<LocalizationFix> {
    let matches = match_descriptors(&query.descriptors, &candidate.descriptors, &params.matching);
    let corr: Vec<Correspondence2D3D> = matches
        .iter()
        .filter_map(|&(qi, ci)| {
            let d = candidate.depths[ci];
            (d.is_finite() && d > 0.0).then(|| Correspondence2D3D {
                image_point: query.keypoints[qi],
                world_point: candidate_pose * candidate.intrinsics.unproject(&candidate.keypoints[ci], d),
            })
        })
        .collect();
    if corr.len() < params.pnp.min_inliers.max(4) {
        return None;
    }
    let res = pnp_ransac(&corr, &query.intrinsics, &params.pnp).ok()?;
    (res.mean_reprojection_error <= params.pnp.reprojection_threshold).then_some(LocalizationFix {
        matched_node: candidate.node_id,
        pose: res.pose,
        inlier_count: res.inlier_count,
        mean_reprojection_error: res.mean_reprojection_error,
        stamp,
    })
}

/// Loop-closure factor data for a fix of the live node against a map node.
///
/// Returns `(from, to, relative_pose, information)`, with information set to
/// `base * inliers / min_inliers`.
pub fn fix_to_loop_factor(
    fix: &LocalizationFix,
    map_node_pose: &Pose,
    live_node: usize,
    base_information: &Matrix6<f64>,
    min_inliers: usize,
) -> (FactorKind, usize, usize, Pose, Matrix6<f64>) {
    let scale = fix.inlier_count as f64 / min_inliers.max(1) as f64;
    (
        FactorKind::LoopClosure,
        fix.matched_node,
        live_node,
        map_node_pose.inverse() * fix.pose,
        base_information * scale,
    )
}

/// Offset from the odometry frame to the map frame, updated at each fix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapCorrection {
    pub t_map_odom: Pose,
    pub last_fix_stamp: Option<f64>,
}

impl Default for MapCorrection {
    fn default() -> Self {
        Self { t_map_odom: Pose::identity(), last_fix_stamp: None }
    }
}

impl MapCorrection {
    /// Jumps to `fix.pose * odom_pose^-1` when the stamps agree within `window` seconds.
    pub fn update(&self, fix: &LocalizationFix, odom_pose: &Pose, odom_stamp: f64, window: f64) -> Result<Self, LocalizationError> {
        if !((fix.stamp - odom_stamp).abs() <= window) {
            return Err(LocalizationError::StaleFix { fix: fix.stamp, odom: odom_stamp, window });
        }
        let mut t = fix.pose * odom_pose.inverse();
        t.rotation.renormalize();
        Ok(Self { t_map_odom: t, last_fix_stamp: Some(fix.stamp) })
    }

    pub fn localized_pose(&self, odom_pose: &Pose) -> Pose {
        self.t_map_odom * odom_pose
    }
}

const KF_MAGIC: &[u8; 4] = b"EXKF";

/// Binary keyframe encoding: magic, node id, six intrinsics, then per keypoint
/// `u`, `v`, depth as f32 and the 32 descriptor bytes. Little-endian.
pub fn write_keyframe<W: Write>(kf: &Keyframe, mut w: W) -> Result<(), LocalizationError> {
    kf.validate()?;
    let mut buf = Vec::with_capacity(60 + kf.len() * 44);
    buf.extend_from_slice(KF_MAGIC);
    buf.extend_from_slice(&(kf.node_id as u32).to_le_bytes());
    let k = &kf.intrinsics;
    for v in [k.fx, k.fy, k.cx, k.cy, k.width, k.height] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&(kf.len() as u32).to_le_bytes());
    for ((p, d), desc) in kf.keypoints.iter().zip(&kf.depths).zip(&kf.descriptors) {
        for v in [p.x as f32, p.y as f32, *d as f32] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(desc);
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_keyframe<R: Read>(mut r: R) -> Result<Keyframe, LocalizationError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut at = 0usize;
    let mut take = |n: usize| -> Result<&[u8], LocalizationError> {
        let s = bytes.get(at..at + n).ok_or_else(|| LocalizationError::Format("truncated".into()))?;
        at += n;
        Ok(s)
    };
    if take(4)? != KF_MAGIC {
        return Err(LocalizationError::Format("bad magic".into()));
    }
    let node_id = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
    let mut k = [0.0; 6];
    for v in &mut k {
        *v = f64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
    }
    let n = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
    let mut kf = Keyframe {
        node_id,
        intrinsics: CameraIntrinsics { fx: k[0], fy: k[1], cx: k[2], cy: k[3], width: k[4], height: k[5] },
        keypoints: Vec::with_capacity(n),
        descriptors: Vec::with_capacity(n),
        depths: Vec::with_capacity(n),
    };
    for _ in 0..n {
        let f = |b: &[u8]| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64;
        let rec = take(44)?;
        kf.keypoints.push(Vector2::new(f(&rec[0..4]), f(&rec[4..8])));
        kf.depths.push(f(&rec[8..12]));
        kf.descriptors.push(rec[12..44].try_into().expect("32 bytes"));
    }
    if at != bytes.len() {
        return Err(LocalizationError::Format("trailing bytes".into()));
    }
    kf.validate()?;
    Ok(kf)
}

/// Writes `stamp,node,tx,ty,tz,qx,qy,qz,qw,inliers,reproj` rows.
pub fn write_fix_log<W: Write>(fixes: &[LocalizationFix], mut w: W) -> std::io::Result<()> {
    writeln!(w, "stamp,node,tx,ty,tz,qx,qy,qz,qw,inliers,reproj")?;
    for f in fixes {
        let p = se3::to_array7(&f.pose);
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{}",
            f.stamp, f.matched_node, p[0], p[1], p[2], p[3], p[4], p[5], p[6], f.inlier_count, f.mean_reprojection_error
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Isometry3, Translation3, UnitQuaternion};
    use proptest::prelude::*;
    use rand::{Rng, RngCore};

    fn cam() -> CameraIntrinsics {
        CameraIntrinsics { fx: 400.0, fy: 400.0, cx: 320.0, cy: 240.0, width: 640.0, height: 480.0 }
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
        let axis = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        Isometry3::from_parts(
            Translation3::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-1.0..1.0)),
            UnitQuaternion::from_scaled_axis(axis * rng.gen_range(0.0..3.0)),
        )
    }

    /// World points visible from `pose`, with exact projections.
    fn visible(rng: &mut ChaCha8Rng, pose: &Pose, n: usize) -> Vec<Correspondence2D3D> {
        let k = cam();
        let mut out = Vec::new();
        while out.len() < n {
            let uv = Vector2::new(rng.gen_range(10.0..630.0), rng.gen_range(10.0..470.0));
            let p_cam = k.unproject(&uv, rng.gen_range(1.0..8.0));
            let world = pose * p_cam;
            let uv = k.project(&(pose.inverse() * world)).unwrap();
            out.push(Correspondence2D3D { image_point: uv, world_point: world });
        }
        out
    }

    fn pose_error(a: &Pose, b: &Pose) -> (f64, f64) {
        let d = a.inverse() * b;
        (d.translation.vector.norm(), se3::rotation_angle(&d))
    }

    #[test]
    fn quartic_with_known_roots() {
        // (x - 1)(x + 2)(x - 0.5)(x - 3)
        let mut r = quartic_roots([1.0, -2.5, -4.0, 8.5, -3.0]);
        r.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(r.len(), 4);
        for (a, b) in r.iter().zip([-2.0, 0.5, 1.0, 3.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        // x^4 + 1 has no real roots
        assert!(quartic_roots([1.0, 0.0, 0.0, 0.0, 1.0]).is_empty());
    }

    #[test]
    fn p3p_contains_the_true_pose() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let pose = random_pose(&mut rng);
            let c = visible(&mut rng, &pose, 3);
            let w = [c[0].world_point, c[1].world_point, c[2].world_point];
            let f = [cam().bearing(&c[0].image_point), cam().bearing(&c[1].image_point), cam().bearing(&c[2].image_point)];
            let sols = p3p(&w, &f);
            let best = sols
                .iter()
                .map(|t| {
                    let e = pose_error(&t.inverse(), &pose);
                    e.0 + e.1
                })
                .fold(f64::INFINITY, f64::min);
            assert!(best < 1e-6, "best {best}");
        }
    }

    #[test]
    fn identity_pose_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = visible(&mut rng, &Pose::identity(), 30);
        let res = pnp_ransac(&c, &cam(), &PnpConfig::default()).unwrap();
        let (t, r) = pose_error(&res.pose, &Pose::identity());
        assert!(t < 1e-8 && r < 1e-8);
        assert_eq!(res.inlier_count, 30);
    }

    #[test]
    fn outliers_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let truth = Isometry3::from_parts(
            Translation3::new(1.0, 0.5, 0.2),
            UnitQuaternion::from_axis_angle(&Vector3::y_axis(), 30f64.to_radians()),
        );
        let mut c = visible(&mut rng, &truth, 100);
        let mut is_outlier = vec![false; 100];
        for (i, o) in is_outlier.iter_mut().enumerate().take(30) {
            c[i].image_point = Vector2::new(rng.gen_range(0.0..640.0), rng.gen_range(0.0..480.0));
            *o = true;
        }
        let res = pnp_ransac(&c, &cam(), &PnpConfig::default()).unwrap();
        let (t, r) = pose_error(&res.pose, &truth);
        assert!(t < 1e-6 && r < 1e-6, "t {t} r {r}");
        for (m, o) in res.inliers.iter().zip(&is_outlier) {
            if !o {
                assert!(*m);
            }
        }
        let t_cw = res.pose.inverse();
        for (m, cc) in res.inliers.iter().zip(&c) {
            if *m {
                assert!(reprojection_error(&t_cw, &cam(), cc) <= 3.0);
            }
        }
    }

    #[test]
    fn too_few_points_and_no_consensus() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = visible(&mut rng, &Pose::identity(), 3);
        assert!(matches!(pnp_ransac(&c, &cam(), &PnpConfig::default()), Err(LocalizationError::TooFewPoints(3))));
        let mut c = visible(&mut rng, &Pose::identity(), 40);
        for cc in &mut c {
            cc.image_point = Vector2::new(rng.gen_range(0.0..640.0), rng.gen_range(0.0..480.0));
        }
        assert!(matches!(pnp_ransac(&c, &cam(), &PnpConfig::default()), Err(LocalizationError::NoConsensus { .. })));
    }

    fn random_descriptor(rng: &mut ChaCha8Rng) -> Descriptor {
        let mut d = [0u8; 32];
        rng.fill_bytes(&mut d);
        d
    }

    fn keyframe(rng: &mut ChaCha8Rng, node_id: usize, n: usize) -> Keyframe {
        Keyframe {
            node_id,
            intrinsics: cam(),
            keypoints: (0..n).map(|_| Vector2::new(rng.gen_range(0.0..640.0), rng.gen_range(0.0..480.0))).collect(),
            descriptors: (0..n).map(|_| random_descriptor(rng)).collect(),
            depths: (0..n).map(|_| rng.gen_range(1.0..5.0)).collect(),
        }
    }

    #[test]
    fn retrieval_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let map: Vec<Keyframe> = (0..5).map(|i| keyframe(&mut rng, i, 50)).collect();
        let ranked = retrieve_candidates(&map[3], &map, 3, &RetrievalParams::default()).unwrap();
        assert_eq!(ranked[0], (3, 50));

        let stranger = keyframe(&mut rng, 99, 50);
        let ranked = retrieve_candidates(&stranger, &map, 3, &RetrievalParams::default()).unwrap();
        assert!(ranked.is_empty());

        assert!(matches!(
            retrieve_candidates(&stranger, &[], 3, &RetrievalParams::default()),
            Err(LocalizationError::EmptyMap)
        ));

        let filtered = RetrievalParams { node_filter: Some(BTreeSet::from([1, 2])), ..Default::default() };
        assert!(retrieve_candidates(&map[3], &map, 3, &filtered).unwrap().is_empty());
    }

    #[test]
    fn retrieval_ignores_storage_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let base = keyframe(&mut rng, 0, 40);
        // two map keyframes sharing the same subset of the query's descriptors tie on score
        let mut map = Vec::new();
        for id in [7, 2, 5] {
            let mut kf = keyframe(&mut rng, id, 40);
            for i in 0..20 {
                kf.descriptors[i] = base.descriptors[i];
            }
            map.push(kf);
        }
        let a = retrieve_candidates(&base, &map, 3, &RetrievalParams::default()).unwrap();
        map.reverse();
        let b = retrieve_candidates(&base, &map, 3, &RetrievalParams::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.iter().map(|x| x.0).collect::<Vec<_>>(), vec![2, 5, 7]);
    }

    /// Builds query and candidate keyframes observing the same landmarks.
    fn scene_pair(rng: &mut ChaCha8Rng, cand_pose: &Pose, query_pose: &Pose, n: usize) -> (Keyframe, Keyframe) {
        let k = cam();
        let mut cand = Keyframe { node_id: 4, intrinsics: k, keypoints: vec![], descriptors: vec![], depths: vec![] };
        let mut query = Keyframe { node_id: 0, intrinsics: k, keypoints: vec![], descriptors: vec![], depths: vec![] };
        while cand.len() < n {
            let uv = Vector2::new(rng.gen_range(50.0..590.0), rng.gen_range(50.0..430.0));
            let d = rng.gen_range(2.0..6.0);
            let world = cand_pose * k.unproject(&uv, d);
            let Some(quv) = k.project(&(query_pose.inverse() * world)) else { continue };
            if !k.in_image(&quv) {
                continue;
            }
            let desc = random_descriptor(rng);
            cand.keypoints.push(uv);
            cand.depths.push(d);
            cand.descriptors.push(desc);
            query.keypoints.push(quv);
            query.depths.push(f64::NAN);
            query.descriptors.push(desc);
        }
        (query, cand)
    }

    #[test]
    fn verify_and_fix_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cand_pose = se3::from_xyz_yaw(2.0, 1.0, 1.0, 0.3);
        let (query, cand) = scene_pair(&mut rng, &cand_pose, &cand_pose, 60);
        let fix = verify_and_fix(&query, 1.0, &cand, &cand_pose, &VerifyParams::default()).unwrap();
        let (t, r) = pose_error(&fix.pose, &cand_pose);
        assert!(t < 1e-8 && r < 1e-8);
        assert_eq!(fix.matched_node, 4);

        let moved = cand_pose * se3::from_xyz_yaw(0.3, 0.0, 0.4, 0.1);
        let (query, cand) = scene_pair(&mut rng, &cand_pose, &moved, 60);
        let fix = verify_and_fix(&query, 2.0, &cand, &cand_pose, &VerifyParams::default()).unwrap();
        let (t, r) = pose_error(&fix.pose, &moved);
        assert!(t < 1e-6 && r < 1e-6);

        let stranger = keyframe(&mut rng, 9, 60);
        assert!(verify_and_fix(&stranger, 3.0, &cand, &cand_pose, &VerifyParams::default()).is_none());
    }

    #[test]
    fn correction_examples() {
        let odom = se3::from_xyz_yaw(1.0, 2.0, 0.0, 0.4);
        let fix = LocalizationFix { matched_node: 0, pose: odom, inlier_count: 30, mean_reprojection_error: 0.1, stamp: 5.0 };
        let c = MapCorrection::default().update(&fix, &odom, 5.0, 0.5).unwrap();
        assert!(se3::log(&c.t_map_odom).norm() < 1e-12);

        let truth = se3::from_xyz_yaw(4.0, 0.0, 0.0, 0.0);
        let drifted = se3::from_xyz_yaw(4.3, 0.0, 0.0, 0.0);
        let fix = LocalizationFix { pose: truth, ..fix };
        let c = MapCorrection::default().update(&fix, &drifted, 5.0, 0.5).unwrap();
        assert!((c.t_map_odom.translation.x + 0.3).abs() < 1e-12);
        let (t, r) = pose_error(&c.localized_pose(&drifted), &truth);
        assert!(t < 1e-12 && r < 1e-12);

        assert!(matches!(
            MapCorrection::default().update(&fix, &drifted, 10.0, 0.5),
            Err(LocalizationError::StaleFix { .. })
        ));
        assert_eq!(MapCorrection::default().localized_pose(&odom), odom);
        let a = se3::from_xyz_yaw(0.1, 0.2, 0.0, 0.1);
        let corr = MapCorrection { t_map_odom: a, last_fix_stamp: None };
        let manual = a * odom;
        assert_eq!(corr.localized_pose(&odom), manual);
    }

    #[test]
    fn loop_factor_from_fix() {
        let map_pose = se3::from_xyz_yaw(1.0, 0.0, 0.0, 0.0);
        let fix = LocalizationFix {
            matched_node: 3,
            pose: se3::from_xyz_yaw(1.5, 0.0, 0.0, 0.0),
            inlier_count: 30,
            mean_reprojection_error: 0.5,
            stamp: 0.0,
        };
        let (kind, from, to, rel, info) = fix_to_loop_factor(&fix, &map_pose, 9, &Matrix6::identity(), 15);
        assert_eq!((kind, from, to), (FactorKind::LoopClosure, 3, 9));
        assert!((rel.translation.x - 0.5).abs() < 1e-12);
        assert_eq!(info, Matrix6::identity() * 2.0);
    }

    #[test]
    fn keyframe_file_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut kf = keyframe(&mut rng, 12, 7);
        for p in &mut kf.keypoints {
            *p = p.map(|v| v as f32 as f64);
        }
        for d in &mut kf.depths {
            *d = *d as f32 as f64;
        }
        kf.depths[2] = f64::NAN;
        let mut buf = Vec::new();
        write_keyframe(&kf, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"EXKF");
        assert_eq!(buf.len(), 4 + 4 + 48 + 4 + 7 * 44);
        let back = read_keyframe(&buf[..]).unwrap();
        assert_eq!(back.keypoints, kf.keypoints);
        assert_eq!(back.descriptors, kf.descriptors);
        assert!(back.depths[2].is_nan());
        assert_eq!(back.depths[3], kf.depths[3]);
        assert!(read_keyframe(&buf[..buf.len() - 1]).is_err());
    }

    #[test]
    fn fix_log_csv() {
        let fix = LocalizationFix {
            matched_node: 3,
            pose: Pose::identity(),
            inlier_count: 30,
            mean_reprojection_error: 0.5,
            stamp: 1.5,
        };
        let mut out = Vec::new();
        write_fix_log(&[fix], &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "stamp,node,tx,ty,tz,qx,qy,qz,qw,inliers,reproj\n1.5,3,0,0,0,0,0,0,1,30,0.5\n");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn noiseless_recovery(seed in 0u64..10_000, n in 6usize..40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pose = random_pose(&mut rng);
            let c = visible(&mut rng, &pose, n);
            let cfg = PnpConfig { min_inliers: 6, ..Default::default() };
            let res = pnp_ransac(&c, &cam(), &cfg).unwrap();
            let (t, r) = pose_error(&res.pose, &pose);
            prop_assert!(t < 1e-8 && r < 1e-8, "t {} r {}", t, r);
        }

        #[test]
        fn correction_reproduces_fix(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let fix_pose = random_pose(&mut rng);
            let odom = random_pose(&mut rng);
            let fix = LocalizationFix { matched_node: 0, pose: fix_pose, inlier_count: 20, mean_reprojection_error: 0.0, stamp: 0.0 };
            let c = MapCorrection::default().update(&fix, &odom, 0.0, 0.1).unwrap();
            let (t, r) = pose_error(&c.localized_pose(&odom), &fix_pose);
            prop_assert!(t < 1e-12 && r < 1e-12);
        }
    }
}
