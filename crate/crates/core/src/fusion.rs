//! Room-based median fusion of node submaps.

use std::collections::BTreeMap;

use nalgebra::Point3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gridmap::{CellIndex, Frame, GridError, GridGeometry, MultiLayerGrid, ELEVATION, SUPPORT_COUNT, VARIANCE};
use crate::posegraph::{GraphError, PoseGraph, RoomGrouping};
use crate::scalar::GridScalar;
use crate::se3::{self, Pose};

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("no submaps to fuse")]
    Empty,
    #[error("submap resolution {got} differs from {expected}")]
    ResolutionMismatch { expected: f64, got: f64 },
    #[error("submap origins are not on a common lattice")]
    Misaligned,
    #[error("no optimized pose for node {0}")]
    MissingPose(usize),
    #[error("submap has no known cells")]
    NoKnownCells,
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Frozen local elevation crop tied to a pose-graph node.
#[derive(Debug, Clone)]
pub struct Submap<T = f64> {
    /// Elevation and variance in the odometry frame at capture time.
    pub grid: MultiLayerGrid<T>,
    pub capture_node: usize,
    pub capture_pose: Pose,
}

/// Fused terrain of one room instance in the map frame.
#[derive(Debug, Clone)]
pub struct RoomTerrainMap<T = f64> {
    pub room_id: usize,
    pub class_name: String,
    pub nodes: Vec<usize>,
    /// Layers `elevation` and `support_count`; `traversability` is added by scoring.
    pub grid: MultiLayerGrid<T>,
}

impl<T: GridScalar> PartialEq for Submap<T> {
    fn eq(&self, o: &Self) -> bool {
        self.grid == o.grid && self.capture_node == o.capture_node && self.capture_pose == o.capture_pose
    }
}

impl<T: GridScalar> PartialEq for RoomTerrainMap<T> {
    fn eq(&self, o: &Self) -> bool {
        self.room_id == o.room_id && self.class_name == o.class_name && self.nodes == o.nodes && self.grid == o.grid
    }
}

/// Sidecar written next to a room map file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoomMetadata {
    pub room_id: usize,
    pub class_name: String,
    pub nodes: Vec<usize>,
    pub frame: String,
}

impl<T: GridScalar> RoomTerrainMap<T> {
    pub fn metadata(&self) -> RoomMetadata {
        RoomMetadata {
            room_id: self.room_id,
            class_name: self.class_name.clone(),
            nodes: self.nodes.clone(),
            frame: self.grid.frame().as_str().to_string(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FusionOutput<T = f64> {
    pub maps: Vec<RoomTerrainMap<T>>,
    /// Room instances skipped because none of their nodes had a submap.
    pub skipped_rooms: Vec<usize>,
}

/// Re-anchors a submap by `optimized_pose * capture_pose^-1` and re-rasterizes it.
///
/// Each known cell center `(x, y, h)` is mapped through the correction and
/// scattered into the nearest cell of a grid aligned to the global lattice.
/// When several sources land in one cell the one closest to its center wins.
pub fn transform_submap<T: GridScalar>(submap: &Submap<T>, optimized_pose: &Pose) -> Result<MultiLayerGrid<T>, FusionError> {
    if !se3::is_valid(optimized_pose) {
        return Err(FusionError::MissingPose(submap.capture_node));
    }
    let correction = optimized_pose * submap.capture_pose.inverse();
    let src = &submap.grid;
    let g = src.geometry();
    let res = g.resolution().f64();
    let elev = src.elevation();
    let var = src.layer(VARIANCE).ok();

    let mut moved: Vec<(Point3<f64>, usize)> = Vec::new();
    for (i, h) in elev.iter().enumerate() {
        if h.is_nan() {
            continue;
        }
        let c = g.center_unchecked(g.cell_of_linear(i));
        let p = correction * Point3::new(c[0].f64(), c[1].f64(), h.f64());
        moved.push((p, i));
    }
    if moved.is_empty() {
        return Err(FusionError::NoKnownCells);
    }
    let lattice = |v: f64| (v / res).round() as i64;
    let (mut c0, mut c1, mut r0, mut r1) = (i64::MAX, i64::MIN, i64::MAX, i64::MIN);
    for (p, _) in &moved {
        c0 = c0.min(lattice(p.x));
        c1 = c1.max(lattice(p.x));
        r0 = r0.min(lattice(p.y));
        r1 = r1.max(lattice(p.y));
    }
    let rows = (r1 - r0 + 1) as usize;
    let cols = (c1 - c0 + 1) as usize;
    let geom = GridGeometry::new(g.resolution(), [T::of(c0 as f64 * res), T::of(r0 as f64 * res)], rows, cols)?;
    let mut out = MultiLayerGrid::new(geom, Frame::Map);
    let mut best = vec![f64::INFINITY; rows * cols];
    let mut out_var = var.map(|_| vec![T::nan(); rows * cols]);
    for (p, i) in &moved {
        let (cx, cy) = (lattice(p.x), lattice(p.y));
        let k = (cy - r0) as usize * cols + (cx - c0) as usize;
        let d = (p.x - cx as f64 * res).powi(2) + (p.y - cy as f64 * res).powi(2);
        if d < best[k] {
            best[k] = d;
            out.elevation_mut()[k] = T::of(p.z);
            if let (Some(ov), Some(v)) = (out_var.as_mut(), var) {
                ov[k] = v[*i];
            }
        }
    }
    if let Some(ov) = out_var {
        out.insert_layer(VARIANCE, ov)?;
    }
    Ok(out)
}

/// Median with the even-count convention (mean of the two middle values); sorts in place.
pub fn median<T: GridScalar>(values: &mut [T]) -> Option<T> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite heights"));
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / T::of(2.0)
    })
}

/// Per-cell median over all known heights of grids sharing a lattice.
///
/// The output covers the union bounding box and carries a `support_count` layer.
pub fn fuse_room<T: GridScalar>(submaps: &[&MultiLayerGrid<T>]) -> Result<MultiLayerGrid<T>, FusionError> {
    let first = submaps.first().ok_or(FusionError::Empty)?;
    let res = first.geometry().resolution();
    let resf = res.f64();
    let o = first.geometry().origin();
    let (ox, oy) = (o[0].f64(), o[1].f64());
    let mut offsets = Vec::with_capacity(submaps.len());
    for s in submaps {
        let g = s.geometry();
        if g.resolution() != res {
            return Err(FusionError::ResolutionMismatch { expected: resf, got: g.resolution().f64() });
        }
        let dx = (g.origin()[0].f64() - ox) / resf;
        let dy = (g.origin()[1].f64() - oy) / resf;
        if (dx - dx.round()).abs() > 1e-4 || (dy - dy.round()).abs() > 1e-4 {
            return Err(FusionError::Misaligned);
        }
        offsets.push((dy.round() as i64, dx.round() as i64));
    }
    let r0 = offsets.iter().map(|o| o.0).min().expect("non-empty");
    let c0 = offsets.iter().map(|o| o.1).min().expect("non-empty");
    let r1 = submaps.iter().zip(&offsets).map(|(s, o)| o.0 + s.geometry().rows() as i64).max().expect("non-empty");
    let c1 = submaps.iter().zip(&offsets).map(|(s, o)| o.1 + s.geometry().cols() as i64).max().expect("non-empty");
    let rows = (r1 - r0) as usize;
    let cols = (c1 - c0) as usize;
    let origin = [T::of(ox + c0 as f64 * resf), T::of(oy + r0 as f64 * resf)];
    let geom = GridGeometry::new(res, origin, rows, cols)?;

    let mut stacks: Vec<Vec<T>> = vec![Vec::new(); rows * cols];
    for (s, off) in submaps.iter().zip(&offsets) {
        let g = s.geometry();
        let base_r = (off.0 - r0) as usize;
        let base_c = (off.1 - c0) as usize;
        for (i, h) in s.elevation().iter().enumerate() {
            if h.is_nan() {
                continue;
            }
            let c = g.cell_of_linear(i);
            stacks[(base_r + c.row) * cols + base_c + c.col].push(*h);
        }
    }
    let mut out = MultiLayerGrid::new(geom, Frame::Map);
    let mut support = vec![T::zero(); rows * cols];
    for (k, stack) in stacks.iter_mut().enumerate() {
        support[k] = T::of(stack.len() as f64);
        if let Some(m) = median(stack) {
            out.elevation_mut()[k] = m;
        }
    }
    out.insert_layer(SUPPORT_COUNT, support)?;
    Ok(out)
}

/// Groups nodes into room instances and fuses each instance's transformed submaps.
///
/// `submaps` is keyed by node id; node poses in `graph` are taken as optimized.
pub fn fuse_all_rooms<T: GridScalar>(
    graph: &PoseGraph,
    submaps: &BTreeMap<usize, Submap<T>>,
    grouping: &RoomGrouping,
) -> Result<FusionOutput<T>, FusionError> {
    let rooms = graph.group_nodes_by_room(grouping)?;
    let mut out = FusionOutput { maps: Vec::new(), skipped_rooms: Vec::new() };
    for room in rooms {
        let mut grids = Vec::new();
        for &n in &room.nodes {
            if let Some(s) = submaps.get(&n) {
                let pose = graph.node(s.capture_node).map_err(|_| FusionError::MissingPose(s.capture_node))?.pose;
                match transform_submap(s, &pose) {
                    Ok(g) => grids.push(g),
                    Err(FusionError::NoKnownCells) => {}
                    Err(e) => return Err(e),
                }
            }
        }
        if grids.is_empty() {
            out.skipped_rooms.push(room.id);
            continue;
        }
        let refs: Vec<&MultiLayerGrid<T>> = grids.iter().collect();
        let grid = fuse_room(&refs)?;
        out.maps.push(RoomTerrainMap { room_id: room.id, class_name: room.class_name, nodes: room.nodes, grid });
    }
    Ok(out)
}

/// Height of the fused map at a world point, if known.
pub fn height_at<T: GridScalar>(grid: &MultiLayerGrid<T>, x: f64, y: f64) -> Option<f64> {
    let c: CellIndex = grid.geometry().world_to_cell([T::of(x), T::of(y)]).ok()?;
    let h = grid.get(ELEVATION, c).ok()?;
    (!h.is_nan()).then(|| h.f64())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::posegraph::NodePayload;
    use nalgebra::{Isometry3, Translation3, UnitQuaternion, Vector3};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn grid_from(origin: [f64; 2], rows: usize, cols: usize, res: f64, f: impl Fn(f64, f64) -> f64) -> MultiLayerGrid {
        let geom = GridGeometry::new(res, origin, rows, cols).unwrap();
        let mut g = MultiLayerGrid::new(geom, Frame::Odom);
        for i in 0..geom.len() {
            let c = geom.cell_to_world(geom.cell_of_linear(i)).unwrap();
            g.elevation_mut()[i] = f(c[0], c[1]);
        }
        g
    }

    fn submap(grid: MultiLayerGrid, pose: Pose) -> Submap {
        Submap { grid, capture_node: 0, capture_pose: pose }
    }

    #[test]
    fn identity_transform_is_passthrough() {
        let g = grid_from([0.4, -0.2], 5, 7, 0.1, |x, y| x + 2.0 * y);
        let pose = se3::from_xyz_yaw(1.0, 2.0, 0.3, 0.7);
        let out = transform_submap(&submap(g.clone(), pose), &pose).unwrap();
        assert_eq!(out.geometry(), g.geometry());
        assert_eq!(out.elevation(), g.elevation());
        assert_eq!(out.frame(), Frame::Map);
    }

    #[test]
    fn vertical_offset_shifts_heights_only() {
        let g = grid_from([0.0, 0.0], 4, 4, 0.1, |x, _| x);
        let cap = Pose::identity();
        let opt = Isometry3::translation(0.0, 0.0, 0.1);
        let out = transform_submap(&submap(g.clone(), cap), &opt).unwrap();
        assert_eq!(out.geometry(), g.geometry());
        for (a, b) in out.elevation().iter().zip(g.elevation()) {
            assert!((a - (b + 0.1)).abs() < 1e-12);
        }
    }

    #[test]
    fn quarter_turn_of_a_ramp() {
        let slope = 0.3;
        let res = 0.05;
        let g = grid_from([-1.0, -1.0], 41, 41, res, |x, _| slope * x);
        let out = transform_submap(&submap(g, Pose::identity()), &se3::from_xyz_yaw(0.0, 0.0, 0.0, std::f64::consts::FRAC_PI_2))
            .unwrap();
        // a ramp rising along +x, turned 90 degrees, rises along +y
        let geom = *out.geometry();
        let mut checked = 0;
        for i in 0..geom.len() {
            let h = out.elevation()[i];
            if h.is_nan() {
                continue;
            }
            let c = geom.cell_to_world(geom.cell_of_linear(i)).unwrap();
            assert!((h - slope * c[1]).abs() <= res / 2.0 * slope + 1e-12);
            checked += 1;
        }
        assert_eq!(checked, 41 * 41);
    }

    #[test]
    fn median_examples() {
        let mut v = [1.0, 2.0, 100.0];
        assert_eq!(median(&mut v), Some(2.0));
        let mut v = [3.0, 1.0];
        assert_eq!(median(&mut v), Some(2.0));
        assert_eq!(median::<f64>(&mut []), None);
    }

    #[test]
    fn fuse_examples() {
        let a = grid_from([0.0, 0.0], 2, 2, 0.1, |_, _| 1.0);
        let fused = fuse_room(&[&a]).unwrap();
        assert_eq!(fused.elevation(), a.elevation());
        assert_eq!(fused.layer(SUPPORT_COUNT).unwrap(), &[1.0; 4]);

        let b = grid_from([0.1, 0.0], 2, 2, 0.1, |_, _| 2.0);
        let c = grid_from([0.1, 0.0], 1, 1, 0.1, |_, _| 100.0);
        let fused = fuse_room(&[&a, &b, &c]).unwrap();
        assert_eq!(fused.geometry().cols(), 3);
        assert_eq!(fused.elevation(), &[1.0, 2.0, 2.0, 1.0, 1.5, 2.0]);
        assert_eq!(fused.layer(SUPPORT_COUNT).unwrap(), &[1.0, 3.0, 1.0, 1.0, 2.0, 1.0]);

        let coarse = grid_from([0.0, 0.0], 2, 2, 0.2, |_, _| 0.0);
        assert!(matches!(fuse_room(&[&a, &coarse]), Err(FusionError::ResolutionMismatch { .. })));
        let shifted = grid_from([0.05, 0.0], 2, 2, 0.1, |_, _| 0.0);
        assert!(matches!(fuse_room(&[&a, &shifted]), Err(FusionError::Misaligned)));
        assert!(matches!(fuse_room::<f64>(&[]), Err(FusionError::Empty)));
    }

    /// Independent oracle: look every cell up in every grid by world coordinate.
    fn brute_force(grids: &[MultiLayerGrid], out: &MultiLayerGrid) -> (Vec<f64>, Vec<f64>) {
        let geom = out.geometry();
        let mut elev = Vec::new();
        let mut count = Vec::new();
        for i in 0..geom.len() {
            let w = geom.cell_to_world(geom.cell_of_linear(i)).unwrap();
            let mut hs: Vec<f64> = grids.iter().filter_map(|g| height_at(g, w[0], w[1])).collect();
            hs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            count.push(hs.len() as f64);
            let n = hs.len();
            elev.push(match n {
                0 => f64::NAN,
                _ if n % 2 == 1 => hs[n / 2],
                _ => (hs[n / 2 - 1] + hs[n / 2]) / 2.0,
            });
        }
        (elev, count)
    }

    fn random_stack(rng: &mut ChaCha8Rng) -> Vec<MultiLayerGrid> {
        let k = rng.gen_range(1..=6);
        (0..k)
            .map(|_| {
                let rows = rng.gen_range(1..8);
                let cols = rng.gen_range(1..8);
                let o = [rng.gen_range(-3..3) as f64 * 0.25, rng.gen_range(-3..3) as f64 * 0.25];
                let mut g = grid_from(o, rows, cols, 0.25, |_, _| 0.0);
                for v in g.elevation_mut() {
                    *v = if rng.gen_bool(0.2) { f64::NAN } else { rng.gen_range(-1.0..1.0) };
                }
                g
            })
            .collect()
    }

    #[test]
    fn matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let grids = random_stack(&mut rng);
            let refs: Vec<&MultiLayerGrid> = grids.iter().collect();
            let out = fuse_room(&refs).unwrap();
            let (elev, count) = brute_force(&grids, &out);
            assert_eq!(out.layer(SUPPORT_COUNT).unwrap(), &count[..]);
            for (a, b) in out.elevation().iter().zip(&elev) {
                assert!(a == b || (a.is_nan() && b.is_nan()));
            }
        }
    }

    #[test]
    fn noisy_staircase_median_beats_single_submap() {
        let truth = |x: f64, _y: f64| ((x / 0.3).floor().clamp(0.0, 5.0)) * 0.17;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise = Normal::new(0.0, 0.01).unwrap();
        let grids: Vec<MultiLayerGrid> = (0..10)
            .map(|_| {
                let mut g = grid_from([0.01, 0.01], 50, 90, 0.02, truth);
                for v in g.elevation_mut() {
                    *v += if rng.gen_bool(0.1) { rng.gen_range(-1.0..1.0) } else { noise.sample(&mut rng) };
                }
                g
            })
            .collect();
        let mae = |g: &MultiLayerGrid| {
            let geom = g.geometry();
            let mut s = 0.0;
            for i in 0..geom.len() {
                let w = geom.cell_to_world(geom.cell_of_linear(i)).unwrap();
                s += (g.elevation()[i] - truth(w[0], w[1])).abs();
            }
            s / geom.len() as f64
        };
        let refs: Vec<&MultiLayerGrid> = grids.iter().collect();
        let fused = fuse_room(&refs).unwrap();
        assert!(mae(&fused) < mae(&grids[0]));
        assert!(mae(&fused) < 0.01, "fused MAE {}", mae(&fused));
    }

    fn two_room_graph() -> (PoseGraph, BTreeMap<usize, Submap>) {
        let mut g = PoseGraph::new(vec!["office".into(), "kitchen".into()]);
        let mut subs = BTreeMap::new();
        for (k, (x, class)) in [(0.0, "office"), (1.0, "office"), (6.0, "kitchen"), (7.0, "kitchen")].iter().enumerate() {
            let pose = se3::from_xyz_yaw(*x, 0.0, 0.0, 0.0);
            g.add_node(pose, k as f64, NodePayload::default()).unwrap();
            g.assign_room_label(k, &[(class, 1.0)]).unwrap();
            let grid = grid_from([x - 0.5, -0.5], 11, 11, 0.1, |_, _| k as f64);
            subs.insert(k, Submap { grid, capture_node: k, capture_pose: pose });
        }
        (g, subs)
    }

    #[test]
    fn fuse_all_rooms_examples() {
        let (g, mut subs) = two_room_graph();
        let out = fuse_all_rooms(&g, &subs, &RoomGrouping::default()).unwrap();
        assert_eq!(out.maps.len(), 2);
        assert!(out.skipped_rooms.is_empty());
        assert_eq!(out.maps[0].nodes, vec![0, 1]);
        assert_eq!(out.maps[0].grid.geometry().cols(), 21);
        assert_eq!(out.maps[1].class_name, "kitchen");
        let meta = out.maps[1].metadata();
        assert_eq!(meta.frame, "map");

        subs.remove(&2);
        subs.remove(&3);
        let out = fuse_all_rooms(&g, &subs, &RoomGrouping::default()).unwrap();
        assert_eq!(out.maps.len(), 1);
        assert_eq!(out.skipped_rooms, vec![1]);
    }

    #[test]
    fn single_node_graph_returns_its_submap() {
        let mut g = PoseGraph::new(vec!["office".into()]);
        let pose = se3::from_xyz_yaw(0.3, 0.1, 0.0, 0.0);
        g.add_node(pose, 0.0, NodePayload::default()).unwrap();
        g.assign_room_label(0, &[("office", 1.0)]).unwrap();
        let grid = grid_from([0.0, 0.0], 3, 4, 0.1, |x, y| x - y);
        let subs = BTreeMap::from([(0, Submap { grid: grid.clone(), capture_node: 0, capture_pose: pose })]);
        let out = fuse_all_rooms(&g, &subs, &RoomGrouping::default()).unwrap();
        assert_eq!(out.maps[0].grid.elevation(), grid.elevation());
        assert_eq!(out.maps[0].grid.geometry(), grid.geometry());
    }

    proptest! {
        #[test]
        fn permutation_invariant_and_idempotent(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let grids = random_stack(&mut rng);
            let refs: Vec<&MultiLayerGrid> = grids.iter().collect();
            let a = fuse_room(&refs).unwrap();
            let rev: Vec<&MultiLayerGrid> = grids.iter().rev().collect();
            let b = fuse_room(&rev).unwrap();
            prop_assert_eq!(a.geometry(), b.geometry());
            for (x, y) in a.elevation().iter().zip(b.elevation()) {
                prop_assert!(x == y || (x.is_nan() && y.is_nan()));
            }
            let same: Vec<&MultiLayerGrid> = vec![&grids[0]; 3];
            let c = fuse_room(&same).unwrap();
            for (x, y) in c.elevation().iter().zip(grids[0].elevation()) {
                prop_assert!(x == y || (x.is_nan() && y.is_nan()));
            }
        }

        #[test]
        fn breakdown_point(inliers in proptest::collection::vec(-1.0f64..1.0, 3..8), seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = inliers.len() - 1;
            let lo = inliers.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = inliers.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut grids: Vec<MultiLayerGrid> = inliers.iter().map(|h| grid_from([0.0, 0.0], 1, 1, 0.1, |_, _| *h)).collect();
            for _ in 0..k {
                let h = rng.gen_range(-1e6..1e6);
                grids.push(grid_from([0.0, 0.0], 1, 1, 0.1, |_, _| h));
            }
            let refs: Vec<&MultiLayerGrid> = grids.iter().collect();
            let m = fuse_room(&refs).unwrap().elevation()[0];
            prop_assert!(m >= lo && m <= hi);
        }

        #[test]
        fn rigid_motion_preserves_known_count_bound(yaw in -3.1f64..3.1, tx in -2.0f64..2.0, tz in -1.0f64..1.0) {
            let g = grid_from([0.0, 0.0], 6, 6, 0.1, |x, _| x);
            let opt = Isometry3::from_parts(Translation3::new(tx, 0.0, tz), UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw));
            let out = transform_submap(&submap(g.clone(), Pose::identity()), &opt).unwrap();
            prop_assert!(out.known_count() <= g.known_count());
            prop_assert!(out.known_count() > 0);
        }
    }
}
