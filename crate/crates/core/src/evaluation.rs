//! Relative pose error and mesh-based reconstruction error.

use std::io::Write;

use nalgebra::Point3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rstar::RTree;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gridmap::{CellIndex, MultiLayerGrid};
use crate::pointcloud::{self, CloudError, PointCloud};
use crate::scalar::GridScalar;
use crate::se3;
use crate::trajectory::Trajectory;

/// Maximum stamp difference for associating estimate and ground truth.
pub const ASSOCIATION_TOLERANCE: f64 = 0.02;
/// Points per square meter used for reconstruction evaluation.
pub const DEFAULT_SAMPLE_DENSITY: f64 = 10_000.0;
/// Triangles steeper than this are excluded by the steep-surface filter.
pub const DEFAULT_STEEP_ANGLE_DEG: f64 = 80.0;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("ground-truth path of {length} m is shorter than the pairing distance {d} m")]
    TooShort { length: f64, d: f64 },
    #[error("only {0} estimate entries could be associated with ground truth")]
    Association(usize),
    #[error("pairing distance must be positive")]
    BadDistance,
    #[error("no quad of four known cells")]
    NoKnownQuad,
    #[error("triangle {0} is degenerate or references a missing vertex")]
    BadTriangle(usize),
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("sample density must be positive")]
    BadDensity,
    #[error(transparent)]
    Cloud(#[from] CloudError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RpeResult {
    pub distance: f64,
    pub translation_rmse: f64,
    /// Degrees.
    pub rotation_rmse: f64,
    pub pair_count: usize,
}

/// Point-to-point distances in centimeters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconError {
    pub mean: f64,
    pub max: f64,
    pub p90: f64,
    pub sample_count: usize,
}

/// Relative pose error with pairs chosen by ground-truth path distance.
pub fn rpe(est: &Trajectory, gt: &Trajectory, d: f64) -> Result<RpeResult, EvalError> {
    if !(d > 0.0 && d.is_finite()) {
        return Err(EvalError::BadDistance);
    }
    let pairs: Vec<(usize, usize)> = gt
        .entries()
        .iter()
        .enumerate()
        .filter_map(|(g, (s, _))| est.nearest(*s, ASSOCIATION_TOLERANCE).map(|e| (g, e)))
        .collect();
    if pairs.len() < 2 {
        return Err(EvalError::Association(pairs.len()));
    }
    let gte = gt.entries();
    let ese = est.entries();
    let mut dist = Vec::with_capacity(pairs.len());
    let mut acc = 0.0;
    for (k, &(g, _)) in pairs.iter().enumerate() {
        if k > 0 {
            let prev = pairs[k - 1].0;
            acc += (gte[g].1.translation.vector - gte[prev].1.translation.vector).norm();
        }
        dist.push(acc);
    }
    let mut se_t = 0.0;
    let mut se_r = 0.0;
    let mut n = 0usize;
    let mut j = 0usize;
    for i in 0..pairs.len() {
        j = j.max(i + 1);
        while j < pairs.len() && dist[j] - dist[i] < d {
            j += 1;
        }
        if j == pairs.len() {
            break;
        }
        let (gi, ei) = pairs[i];
        let (gj, ej) = pairs[j];
        let rel_gt = gte[gi].1.inverse() * gte[gj].1;
        let rel_est = ese[ei].1.inverse() * ese[ej].1;
        let delta = rel_gt.inverse() * rel_est;
        se_t += delta.translation.vector.norm_squared();
        se_r += rotation_between(&rel_gt, &rel_est).to_degrees().powi(2);
        n += 1;
    }
    if n == 0 {
        return Err(EvalError::TooShort { length: acc, d });
    }
    Ok(RpeResult {
        distance: d,
        translation_rmse: (se_t / n as f64).sqrt(),
        rotation_rmse: (se_r / n as f64).sqrt(),
        pair_count: n,
    })
}

/// Geodesic angle between two rotations via the chord form, exactly zero for
/// identical inputs.
fn rotation_between(a: &se3::Pose, b: &se3::Pose) -> f64 {
    let (qa, qb) = (a.rotation.coords, b.rotation.coords);
    let (m, p) = ((qa - qb).norm(), (qa + qb).norm());
    2.0 * m.min(p).atan2(m.max(p))
}

/// Triangle mesh with in-range indices and positive-area faces.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TriMesh {
    vertices: Vec<Point3<f64>>,
    triangles: Vec<[usize; 3]>,
}

impl TriMesh {
    pub fn new(vertices: Vec<Point3<f64>>, triangles: Vec<[usize; 3]>) -> Result<Self, EvalError> {
        for (i, t) in triangles.iter().enumerate() {
            if t.iter().any(|&v| v >= vertices.len()) {
                return Err(EvalError::BadTriangle(i));
            }
            let a = triangle_area(&vertices[t[0]], &vertices[t[1]], &vertices[t[2]]);
            if !(a > 0.0) {
                return Err(EvalError::BadTriangle(i));
            }
        }
        Ok(Self { vertices, triangles })
    }

    pub fn vertices(&self) -> &[Point3<f64>] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn corners(&self, i: usize) -> [Point3<f64>; 3] {
        let t = self.triangles[i];
        [self.vertices[t[0]], self.vertices[t[1]], self.vertices[t[2]]]
    }

    pub fn triangle_area(&self, i: usize) -> f64 {
        let [a, b, c] = self.corners(i);
        triangle_area(&a, &b, &c)
    }

    pub fn area(&self) -> f64 {
        (0..self.triangles.len()).map(|i| self.triangle_area(i)).sum()
    }

    /// Angle between the face normal and vertical, in degrees.
    pub fn slope_deg(&self, i: usize) -> f64 {
        let [a, b, c] = self.corners(i);
        let n = (b - a).cross(&(c - a));
        (n.z.abs() / n.norm()).clamp(0.0, 1.0).acos().to_degrees()
    }

    pub fn write_ply<W: Write>(&self, w: W) -> Result<(), EvalError> {
        pointcloud::write_ply_ascii(&self.vertices, &self.triangles, w)?;
        Ok(())
    }
}

fn triangle_area(a: &Point3<f64>, b: &Point3<f64>, c: &Point3<f64>) -> f64 {
    0.5 * (b - a).cross(&(c - a)).norm()
}

/// Meshes the elevation layer with vertices at cell centers.
pub fn heightmap_to_mesh<T: GridScalar>(grid: &MultiLayerGrid<T>) -> Result<TriMesh, EvalError> {
    let g = grid.geometry();
    let (rows, cols) = (g.rows(), g.cols());
    let h = grid.elevation();
    let known = |r: usize, c: usize| !h[g.linear(CellIndex { row: r, col: c })].is_nan();
    let mut index = vec![usize::MAX; g.len()];
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    let mut vid = |r: usize, c: usize, vertices: &mut Vec<Point3<f64>>| {
        let cell = CellIndex { row: r, col: c };
        let k = g.linear(cell);
        if index[k] == usize::MAX {
            let [x, y] = g.center_unchecked(cell);
            index[k] = vertices.len();
            vertices.push(Point3::new(x.f64(), y.f64(), h[k].f64()));
        }
        index[k]
    };
    for r in 0..rows.saturating_sub(1) {
        for c in 0..cols.saturating_sub(1) {
            if !(known(r, c) && known(r, c + 1) && known(r + 1, c) && known(r + 1, c + 1)) {
                continue;
            }
            let a = vid(r, c, &mut vertices);
            let b = vid(r, c + 1, &mut vertices);
            let d = vid(r + 1, c + 1, &mut vertices);
            let e = vid(r + 1, c, &mut vertices);
            triangles.push([a, b, d]);
            triangles.push([a, d, e]);
        }
    }
    if triangles.is_empty() {
        return Err(EvalError::NoKnownQuad);
    }
    TriMesh::new(vertices, triangles)
}

/// Uniform surface samples, `round(area * density)` per triangle with a
/// seeded stochastic remainder. Triangles steeper than `max_slope_deg` are
/// skipped when given.
pub fn sample_mesh(
    mesh: &TriMesh,
    density: f64,
    seed: u64,
    max_slope_deg: Option<f64>,
) -> Result<PointCloud, EvalError> {
    if !(density > 0.0 && density.is_finite()) {
        return Err(EvalError::BadDensity);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offset: f64 = rng.gen();
    let mut acc = 0.0f64;
    let mut points = Vec::new();
    for i in 0..mesh.triangles().len() {
        if max_slope_deg.is_some_and(|m| mesh.slope_deg(i) > m) {
            continue;
        }
        let before = (acc + offset).floor();
        acc += mesh.triangle_area(i) * density;
        let count = ((acc + offset).floor() - before) as usize;
        let [a, b, c] = mesh.corners(i);
        let (ab, ac) = (b - a, c - a);
        for _ in 0..count {
            let (mut u, mut v): (f64, f64) = (rng.gen(), rng.gen());
            if u + v > 1.0 {
                u = 1.0 - u;
                v = 1.0 - v;
            }
            points.push(a + ab * u + ac * v);
        }
    }
    Ok(PointCloud::new(points, "map", 0.0))
}

/// Linear-interpolated quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Exact nearest-neighbor distance from each query to `reference`.
pub fn nearest_distances(query: &[Point3<f64>], reference: &[Point3<f64>]) -> Result<Vec<f64>, EvalError> {
    if query.is_empty() || reference.is_empty() {
        return Err(EvalError::EmptyCloud);
    }
    let tree = RTree::bulk_load(reference.iter().map(|p| [p.x, p.y, p.z]).collect());
    Ok(query
        .iter()
        .map(|p| {
            let r = tree.nearest_neighbor(&[p.x, p.y, p.z]).expect("non-empty tree");
            (p - Point3::from(*r)).norm()
        })
        .collect())
}

/// Mean, max and 90th percentile of nearest distances, in centimeters.
pub fn point_to_point_error(sampled: &PointCloud, gt: &PointCloud) -> Result<ReconError, EvalError> {
    let mut d = nearest_distances(&sampled.points, &gt.points)?;
    d.iter_mut().for_each(|v| *v *= 100.0);
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    d.sort_by(f64::total_cmp);
    let max = *d.last().unwrap();
    Ok(ReconError { mean: mean.min(max), max, p90: quantile_sorted(&d, 0.9), sample_count: d.len() })
}

pub fn write_rpe_csv<W: Write>(rows: &[RpeResult], mut w: W) -> std::io::Result<()> {
    writeln!(w, "distance,translation_rmse,rotation_rmse,pair_count")?;
    for r in rows {
        writeln!(w, "{},{},{},{}", r.distance, r.translation_rmse, r.rotation_rmse, r.pair_count)?;
    }
    Ok(())
}

pub fn write_recon_csv<W: Write>(e: &ReconError, mut w: W) -> std::io::Result<()> {
    writeln!(w, "mean_cm,max_cm,p90_cm,sample_count")?;
    writeln!(w, "{},{},{},{}", e.mean, e.max, e.p90, e.sample_count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridmap::{Frame, GridGeometry};
    use crate::se3::{from_xyz_yaw, Pose};
    use nalgebra::Vector3;
    use proptest::prelude::*;
    use rand::Rng;

    fn straight(n: usize, step: f64, scale: f64) -> Trajectory {
        Trajectory::new((0..n).map(|i| (i as f64 * 0.1, from_xyz_yaw(i as f64 * step * scale, 0.0, 0.0, 0.0))).collect())
            .unwrap()
    }

    fn wiggly(n: usize, seed: u64) -> Trajectory {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Pose::identity();
        let mut v = Vec::new();
        for i in 0..n {
            v.push((i as f64 * 0.1, p));
            let xi = nalgebra::Vector6::new(
                0.2 + rng.gen_range(0.0..0.1),
                rng.gen_range(-0.05..0.05),
                rng.gen_range(-0.02..0.02),
                rng.gen_range(-0.05..0.05),
                rng.gen_range(-0.05..0.05),
                rng.gen_range(-0.2..0.2),
            );
            p = p * se3::exp(&xi);
        }
        Trajectory::new(v).unwrap()
    }

    #[test]
    fn rpe_identity_and_errors() {
        let t = straight(101, 0.1, 1.0);
        let r = rpe(&t, &t, 5.0).unwrap();
        assert_eq!((r.translation_rmse, r.rotation_rmse), (0.0, 0.0));
        assert!(matches!(rpe(&t, &t, 20.0), Err(EvalError::TooShort { .. })));
        let shifted = Trajectory::new(t.entries().iter().map(|(s, p)| (s + 1000.0, *p)).collect()).unwrap();
        assert!(matches!(rpe(&shifted, &t, 1.0), Err(EvalError::Association(0))));
    }

    #[test]
    fn rpe_scale_drift() {
        let gt = straight(101, 0.1, 1.0);
        let est = straight(101, 0.1, 1.04);
        let r = rpe(&est, &gt, 5.0).unwrap();
        // Every pair spans exactly 5 m of ground truth (allowing for float accumulation).
        assert!((r.translation_rmse - 0.20).abs() < 0.005, "{r:?}");
        assert_eq!(r.rotation_rmse, 0.0);
    }

    #[test]
    fn rpe_rigid_invariance() {
        let gt = wiggly(200, 3);
        let est = wiggly(200, 4);
        let g = se3::exp(&nalgebra::Vector6::new(3.0, -1.0, 0.5, 0.3, -0.2, 1.1));
        let a = rpe(&est, &gt, 2.0).unwrap();
        let b = rpe(&est.transformed(&g), &gt, 2.0).unwrap();
        assert_eq!(a.pair_count, b.pair_count);
        assert!((a.translation_rmse - b.translation_rmse).abs() < 1e-12);
        assert!((a.rotation_rmse - b.rotation_rmse).abs() < 1e-10);
        let c = rpe(&gt.transformed(&g), &gt, 2.0).unwrap();
        assert!(c.translation_rmse < 1e-12 && c.rotation_rmse < 1e-6);
    }

    fn grid(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> MultiLayerGrid<f64> {
        let mut g = MultiLayerGrid::new(GridGeometry::new(0.02, [0.0, 0.0], rows, cols).unwrap(), Frame::Map);
        for r in 0..rows {
            for c in 0..cols {
                g.set(crate::gridmap::ELEVATION, CellIndex { row: r, col: c }, f(r, c)).unwrap();
            }
        }
        g
    }

    #[test]
    fn mesh_small_cases() {
        let m = heightmap_to_mesh(&grid(2, 2, |_, _| 0.3)).unwrap();
        assert_eq!(m.triangles().len(), 2);
        assert!(m.vertices().iter().all(|v| v.z == 0.3));
        assert!((m.area() - 0.0004).abs() < 1e-15);
        let hole = grid(2, 2, |r, c| if r == 1 && c == 1 { f64::NAN } else { 0.0 });
        assert!(matches!(heightmap_to_mesh(&hole), Err(EvalError::NoKnownQuad)));
        let m = heightmap_to_mesh(&grid(3, 3, |r, c| if r == 2 && c == 2 { f64::NAN } else { 0.0 })).unwrap();
        assert_eq!(m.triangles().len(), 6);
    }

    #[test]
    fn staircase_mesh_area() {
        // Five treads of 10 cells along x, 0.1 m risers.
        let (rows, cols, res, rise) = (20usize, 50usize, 0.02, 0.1);
        let m = heightmap_to_mesh(&grid(rows, cols, |_, c| (c / 10) as f64 * rise)).unwrap();
        let quads_per_row = cols - 1;
        let riser_quads = (rows - 1) * 4;
        let flat_quads = (rows - 1) * quads_per_row - riser_quads;
        let expected = flat_quads as f64 * res * res + riser_quads as f64 * res * (res * res + rise * rise).sqrt();
        assert!((m.area() - expected).abs() < 1e-9 * expected);
        let tread: f64 = (0..m.triangles().len()).filter(|&i| m.slope_deg(i) < 1e-9).map(|i| m.triangle_area(i)).sum();
        let analytic_tread = ((rows - 1) * (cols - 1)) as f64 * res * res - riser_quads as f64 * res * res;
        assert!((tread - analytic_tread).abs() < 0.01 * analytic_tread);
        assert!(m.slope_deg(0) < 1e-9);
    }

    #[test]
    fn triangle_invariant() {
        let v = vec![Point3::origin(), Point3::new(1.0, 0.0, 0.0), Point3::new(2.0, 0.0, 0.0)];
        assert!(matches!(TriMesh::new(v.clone(), vec![[0, 1, 2]]), Err(EvalError::BadTriangle(0))));
        assert!(matches!(TriMesh::new(v, vec![[0, 1, 3]]), Err(EvalError::BadTriangle(0))));
    }

    fn unit_square(z: f64) -> TriMesh {
        let v = vec![
            Point3::new(0.0, 0.0, z),
            Point3::new(1.0, 0.0, z),
            Point3::new(1.0, 1.0, z),
            Point3::new(0.0, 1.0, z),
        ];
        TriMesh::new(v, vec![[0, 1, 2], [0, 2, 3]]).unwrap()
    }

    #[test]
    fn sample_count_and_plane() {
        for seed in 0..5 {
            let c = sample_mesh(&unit_square(0.0), 10_000.0, seed, None).unwrap();
            assert!((c.len() as i64 - 10_000).abs() <= 1);
        }
        let v = vec![Point3::new(0.0, 0.0, 0.0), Point3::new(1.0, 0.2, 0.5), Point3::new(0.3, 1.0, -0.4)];
        let m = TriMesh::new(v.clone(), vec![[0, 1, 2]]).unwrap();
        let n = (v[1] - v[0]).cross(&(v[2] - v[0])).normalize();
        let c = sample_mesh(&m, 5000.0, 9, None).unwrap();
        assert!(c.points.iter().all(|p| (p - v[0]).dot(&n).abs() < 1e-9));
        assert!(matches!(sample_mesh(&m, 0.0, 0, None), Err(EvalError::BadDensity)));
    }

    #[test]
    fn steep_filter() {
        let v = vec![Point3::new(0.0, 0.0, 0.0), Point3::new(1.0, 0.0, 0.0), Point3::new(0.0, 0.0, 1.0)];
        let m = TriMesh::new(v, vec![[0, 1, 2]]).unwrap();
        assert!((m.slope_deg(0) - 90.0).abs() < 1e-9);
        assert!(sample_mesh(&m, 100.0, 0, Some(DEFAULT_STEEP_ANGLE_DEG)).unwrap().is_empty());
        assert!(!sample_mesh(&m, 100.0, 0, None).unwrap().is_empty());
    }

    #[test]
    fn point_errors() {
        let gt = sample_mesh(&unit_square(0.0), 2000.0, 1, None).unwrap();
        let sub = PointCloud::new(gt.points[..500].to_vec(), "map", 0.0);
        let e = point_to_point_error(&sub, &gt).unwrap();
        assert_eq!((e.mean, e.max, e.p90, e.sample_count), (0.0, 0.0, 0.0, 500));
        // Shift a grid of points 3 mm up: every nearest neighbor is the point below.
        let flat: Vec<Point3<f64>> =
            (0..30).flat_map(|i| (0..30).map(move |j| Point3::new(i as f64 * 0.05, j as f64 * 0.05, 0.0))).collect();
        let up: Vec<Point3<f64>> = flat.iter().map(|p| p + Vector3::new(0.0, 0.0, 0.003)).collect();
        let e = point_to_point_error(&PointCloud::new(up, "map", 0.0), &PointCloud::new(flat, "map", 0.0)).unwrap();
        for v in [e.mean, e.max, e.p90] {
            assert!((v - 0.3).abs() < 1e-12);
        }
        assert!(matches!(point_to_point_error(&PointCloud::default(), &gt), Err(EvalError::EmptyCloud)));
    }

    #[test]
    fn coplanar_reference_cloud() {
        // Many points sharing one coordinate must not break the index.
        let flat: Vec<Point3<f64>> =
            (0..200).flat_map(|i| (0..200).map(move |j| Point3::new(i as f64 * 0.01, j as f64 * 0.01, 0.5))).collect();
        let q = vec![Point3::new(0.504, 0.996, 0.5)];
        let d = nearest_distances(&q, &flat).unwrap();
        assert!((d[0] - (0.004f64.powi(2) + 0.004f64.powi(2)).sqrt()).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn quantile_matches_sort_oracle(mut v in prop::collection::vec(-1000i32..1000, 1..200), k in 0usize..=4) {
            let q = k as f64 / 4.0;
            let mut s: Vec<f64> = v.iter().map(|&x| x as f64).collect();
            s.sort_by(f64::total_cmp);
            v.sort();
            // Oracle in exact integer-plus-fraction arithmetic.
            let n = v.len();
            let num = (n - 1) * k;
            let lo = num / 4;
            let frac = (num % 4) as f64 / 4.0;
            let hi = (lo + 1).min(n - 1);
            let oracle = v[lo] as f64 + frac * (v[hi] - v[lo]) as f64;
            prop_assert_eq!(quantile_sorted(&s, q), oracle);
        }

        #[test]
        fn kd_matches_brute_force(seed in 0u64..1000, n in 1usize..2000, m in 1usize..50) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut pt = || Point3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), (rng.gen_range(0..4) as f64) * 0.1);
            let refs: Vec<_> = (0..n).map(|_| pt()).collect();
            let qs: Vec<_> = (0..m).map(|_| pt()).collect();
            let d = nearest_distances(&qs, &refs).unwrap();
            for (q, dq) in qs.iter().zip(d) {
                let brute = refs.iter().map(|r| (q - r).norm()).fold(f64::INFINITY, f64::min);
                prop_assert_eq!(dq, brute);
            }
        }

        #[test]
        fn rpe_self_is_zero(seed in 0u64..200, d in 0.5f64..5.0) {
            let t = wiggly(120, seed);
            let r = rpe(&t, &t, d).unwrap();
            prop_assert_eq!((r.translation_rmse, r.rotation_rmse), (0.0, 0.0));
            prop_assert!(r.pair_count >= 1);
        }
    }
}
