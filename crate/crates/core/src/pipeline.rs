//! End-to-end stages: simulate, map, fuse, score, localize and evaluate.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{Matrix6, Point3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::elevation::{RollingElevationMap, RollingMapConfig, SensorPose};
use crate::evaluation::{self, EvalError, ReconError, RpeResult};
use crate::fusion::{self, FusionError, FusionOutput, Submap};
use crate::gridmap::{CellIndex, MultiLayerGrid, TRAVERSABILITY};
use crate::localization::{
    self, Keyframe, LocalizationFix, MapCorrection, RetrievalParams, VerifyParams,
};
use crate::pointcloud::PointCloud;
use crate::posegraph::{self, FactorKind, GraphError, NodePayload, OptimizeReport, PoseGraph, RoomGrouping, SpacingPolicy};
use crate::se3::Pose;
use crate::simworld::{
    self, DriftConfig, GaitConfig, KeyframeNoise, LabelConfig, NodeLabel, RenderConfig, Scene, SceneSpec, SimError,
};
use crate::trajectory::Trajectory;
use crate::traversability::{
    self, ClassificationReport, LabelGrid, NormalsParams, TraversabilityMap, TraversabilityParams,
};

/// Layer holding the normals-baseline score in scored maps.
pub const NORMALS_SCORE: &str = "normals_score";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl PipelineError {
    /// Process exit code: 2 configuration, 3 data, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Data(_) => 3,
            PipelineError::Numerical(_) => 4,
        }
    }
}

impl From<SimError> for PipelineError {
    fn from(e: SimError) -> Self {
        PipelineError::Config(e.to_string())
    }
}

impl From<GraphError> for PipelineError {
    fn from(e: GraphError) -> Self {
        match e {
            GraphError::NonFiniteCost => PipelineError::Numerical(e.to_string()),
            _ => PipelineError::Data(e.to_string()),
        }
    }
}

impl From<FusionError> for PipelineError {
    fn from(e: FusionError) -> Self {
        PipelineError::Data(e.to_string())
    }
}

impl From<EvalError> for PipelineError {
    fn from(e: EvalError) -> Self {
        PipelineError::Data(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrajectoryConfig {
    /// `[x, y, ground_z]` polyline.
    pub waypoints: Vec<[f64; 3]>,
    pub dt: f64,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self { waypoints: Vec::new(), dt: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SensingConfig {
    pub clouds: bool,
    pub keyframes: bool,
    /// Landmarks per square meter of visible surface.
    pub landmark_density: f64,
    /// Landmarks belong to the world: a prior map and a live run must share this seed.
    pub landmark_seed: u64,
    pub keyframe_noise: KeyframeNoise,
}

impl Default for SensingConfig {
    fn default() -> Self {
        Self { clouds: true, keyframes: true, landmark_density: 8.0, landmark_seed: 0, keyframe_noise: KeyframeNoise::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MappingConfig {
    pub rolling: RollingMapConfig,
    pub spacing: SpacingPolicy,
    pub submap_side: f64,
    pub loop_closures: bool,
    /// Minimum node-id gap between a node and its loop-closure candidates.
    pub min_loop_separation: usize,
    pub loop_search_radius: f64,
    pub loop_candidates: usize,
    pub verify: VerifyParams,
    /// Loop-closure standard deviations at the inlier minimum.
    pub loop_sigma_translation: f64,
    pub loop_sigma_rotation: f64,
    pub optimize_iterations: usize,
}

impl Default for MappingConfig {
    fn default() -> Self {
        Self {
            rolling: RollingMapConfig::default(),
            spacing: SpacingPolicy::default(),
            submap_side: 6.0,
            loop_closures: true,
            min_loop_separation: 8,
            loop_search_radius: 3.0,
            loop_candidates: 3,
            verify: VerifyParams::default(),
            loop_sigma_translation: 0.02,
            loop_sigma_rotation: 0.5f64.to_radians(),
            optimize_iterations: 100,
        }
    }
}

impl MappingConfig {
    pub fn loop_information(&self) -> Matrix6<f64> {
        let t = 1.0 / self.loop_sigma_translation.powi(2);
        let r = 1.0 / self.loop_sigma_rotation.powi(2);
        Matrix6::from_diagonal(&Vector6::new(t, t, t, r, r, r))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TraversalConfig {
    pub step: TraversabilityParams,
    pub normals: NormalsParams,
    /// Number of threshold intervals in the sweep.
    pub threshold_steps: usize,
}

impl Default for TraversalConfig {
    fn default() -> Self {
        Self { step: TraversabilityParams::default(), normals: NormalsParams::default(), threshold_steps: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LocalizeConfig {
    pub verify: VerifyParams,
    pub candidates: usize,
    /// Odometry distance between localization attempts.
    pub fix_spacing: f64,
    /// Map nodes farther than this from the predicted position are ignored.
    pub search_radius: f64,
    pub stale_window: f64,
    /// Map directory of a previous run; defaults to this run's map.
    pub prior_map: Option<String>,
}

impl Default for LocalizeConfig {
    fn default() -> Self {
        Self {
            verify: VerifyParams::default(),
            candidates: 3,
            fix_spacing: 0.8,
            search_radius: 3.0,
            stale_window: 0.2,
            prior_map: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub rpe_distances: Vec<f64>,
    /// Estimate trajectory, relative to the run directory.
    pub rpe_estimate: String,
    pub sample_density: f64,
    pub ground_truth_density: f64,
    pub steep_filter: bool,
    pub steep_angle_deg: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            rpe_distances: vec![1.0, 5.0],
            rpe_estimate: "sim/odom.tum".into(),
            sample_density: evaluation::DEFAULT_SAMPLE_DENSITY,
            ground_truth_density: 250_000.0,
            steep_filter: true,
            steep_angle_deg: evaluation::DEFAULT_STEEP_ANGLE_DEG,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Scene TOML path, relative to the configuration file; overrides `scene`.
    pub scene_file: Option<String>,
    pub scene: SceneSpec,
    pub trajectory: TrajectoryConfig,
    pub gait: GaitConfig,
    pub render: RenderConfig,
    pub sensing: SensingConfig,
    pub labels: LabelConfig,
    pub drift: DriftConfig,
    pub mapping: MappingConfig,
    pub fusion: RoomGrouping,
    pub traversability: TraversalConfig,
    pub localization: LocalizeConfig,
    pub evaluation: EvalConfig,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration is serializable")
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.scene.validate()?;
        self.gait.validate()?;
        self.drift.validate()?;
        self.render.intrinsics.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.mapping.rolling.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.traversability.step.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        if self.trajectory.waypoints.len() < 2 || !(self.trajectory.dt > 0.0) {
            return Err(PipelineError::Config("trajectory needs two waypoints and positive dt".into()));
        }
        if !(self.mapping.submap_side > 0.0) || self.mapping.submap_side > self.mapping.rolling.window_side {
            return Err(PipelineError::Config("submap_side must be positive and fit the rolling window".into()));
        }
        if !(self.localization.fix_spacing > 0.0) || self.traversability.threshold_steps == 0 {
            return Err(PipelineError::Config("fix_spacing and threshold_steps must be positive".into()));
        }
        Ok(())
    }
}

/// Data recorded at one trajectory sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SimFrame {
    pub index: usize,
    pub stamp: f64,
    /// Sensor-frame cloud rendered at the true pose.
    pub cloud: Option<PointCloud>,
    /// Keyframe at the true pose; `node_id` holds the frame index.
    pub keyframe: Option<Keyframe>,
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub scene: Scene,
    pub ground_truth: Trajectory,
    pub odometry: Trajectory,
    pub frames: Vec<SimFrame>,
    pub labels: Vec<NodeLabel>,
    pub classes: Vec<String>,
}

pub fn simulate(cfg: &PipelineConfig) -> Result<Simulation, PipelineError> {
    cfg.validate()?;
    let scene = simworld::build_scene(&cfg.scene)?;
    let gt = simworld::generate_gait_trajectory(&cfg.gait, &cfg.trajectory.waypoints, cfg.trajectory.dt)?;
    let drift = DriftConfig { seed: cfg.seed, ..cfg.drift.clone() };
    let odom = simworld::corrupt_odometry(&gt, &drift);
    let landmarks = if cfg.sensing.keyframes {
        Some(simworld::generate_landmarks(&scene, cfg.sensing.landmark_density, cfg.sensing.landmark_seed)?)
    } else {
        None
    };
    let frames = gt
        .entries()
        .iter()
        .enumerate()
        .map(|(i, (stamp, pose))| {
            let cloud = cfg.sensing.clouds.then(|| {
                let mut c = simworld::render_depth_cloud(&scene, pose, &cfg.render, cfg.seed, i as u64);
                c.stamp = *stamp;
                c
            });
            let keyframe = landmarks.as_ref().map(|lm| {
                simworld::synth_keyframe(
                    &scene,
                    pose,
                    &cfg.render.intrinsics,
                    lm,
                    &cfg.sensing.keyframe_noise,
                    i,
                    cfg.seed,
                )
            });
            SimFrame { index: i, stamp: *stamp, cloud, keyframe }
        })
        .collect();
    let labels_cfg = LabelConfig { seed: cfg.seed, ..cfg.labels.clone() };
    let labels = simworld::label_rooms(&scene, &simworld::positions(&gt), &labels_cfg)?;
    let classes = simworld::room_classes(scene.rooms());
    Ok(Simulation { scene, ground_truth: gt, odometry: odom, frames, labels, classes })
}

#[derive(Debug, Clone)]
pub struct MapResult {
    /// Optimized graph; node poses are camera poses.
    pub graph: PoseGraph,
    pub submaps: BTreeMap<usize, Submap<f64>>,
    pub keyframes: BTreeMap<usize, Keyframe>,
    /// Frame index at which each node was created.
    pub node_frames: Vec<usize>,
    pub loop_closures: usize,
    pub report: Option<OptimizeReport>,
}

/// Runs the rolling elevation map along the odometry, creates spaced nodes
/// with labels, keyframes and submaps, adds verified loop closures and
/// optimizes the graph.
///
/// The submap of a node holds the cells observed between its creation and
/// the creation of the next node.
pub fn build_map(
    cfg: &PipelineConfig,
    odometry: &Trajectory,
    frames: &[SimFrame],
    labels: &[NodeLabel],
    classes: &[String],
) -> Result<MapResult, PipelineError> {
    if odometry.is_empty() || frames.len() != odometry.len() || labels.len() != odometry.len() {
        return Err(PipelineError::Data(format!(
            "{} poses, {} frames and {} labels do not line up",
            odometry.len(),
            frames.len(),
            labels.len()
        )));
    }
    let m = &cfg.mapping;
    let start = odometry.entries()[0].1.translation.vector;
    let mut rolling = RollingElevationMap::<f64>::new(m.rolling.clone(), [start.x, start.y])
        .map_err(|e| PipelineError::Config(e.to_string()))?;
    let mut graph = PoseGraph::new(classes.to_vec()).with_spacing(m.spacing);
    let mut out = MapResult {
        graph: PoseGraph::new(classes.to_vec()),
        submaps: BTreeMap::new(),
        keyframes: BTreeMap::new(),
        node_frames: Vec::new(),
        loop_closures: 0,
        report: None,
    };
    let loop_info = m.loop_information();
    let snapshot = |rolling: &RollingElevationMap<f64>, graph: &PoseGraph, id: usize| {
        if !cfg.sensing.clouds {
            return None;
        }
        let n = graph.node(id).expect("existing node");
        rolling.snapshot_submap_since(id, &n.pose, m.submap_side, n.stamp).ok()
    };
    for (i, ((stamp, pose), frame)) in odometry.entries().iter().zip(frames).enumerate() {
        if graph.is_spaced(pose) {
            if let Some(prev) = graph.nodes().last().map(|n| n.id) {
                if let Some(s) = snapshot(&rolling, &graph, prev) {
                    out.submaps.insert(prev, s);
                }
            }
            let id = graph.len();
            let payload = NodePayload {
                submap: cfg.sensing.clouds.then(|| format!("node_{id:05}.grid")),
                keyframe: frame.keyframe.as_ref().map(|_| format!("node_{id:05}.kf")),
            };
            graph.add_node(*pose, *stamp, payload)?;
            let dist: Vec<(&str, f64)> = labels[i].distribution.iter().map(|(c, p)| (c.as_str(), *p)).collect();
            graph.assign_room_label(id, &dist)?;
            out.node_frames.push(i);
            if let Some(kf) = &frame.keyframe {
                let mut kf = kf.clone();
                kf.node_id = id;
                if m.loop_closures {
                    if let Some(fix) = detect_loop(&graph, &out.keyframes, &kf, *stamp, m) {
                        let cand = graph.node(fix.matched_node)?.pose;
                        let (kind, from, to, rel, info) =
                            localization::fix_to_loop_factor(&fix, &cand, id, &loop_info, m.verify.pnp.min_inliers);
                        graph.add_factor(kind, from, to, rel, info)?;
                        out.loop_closures += 1;
                    }
                }
                out.keyframes.insert(id, kf);
            }
        }
        rolling.recenter([pose.translation.x, pose.translation.y]);
        if let Some(c) = &frame.cloud {
            rolling
                .integrate_cloud(c, &SensorPose { pose: *pose, stamp: *stamp })
                .map_err(|e| PipelineError::Data(format!("frame {i}: {e}")))?;
        }
    }
    if let Some(last) = graph.nodes().last().map(|n| n.id) {
        if let Some(s) = snapshot(&rolling, &graph, last) {
            out.submaps.insert(last, s);
        }
    }
    if out.loop_closures > 0 {
        out.report = Some(graph.optimize(m.optimize_iterations, 1e-12)?);
    }
    out.graph = graph;
    Ok(out)
}

fn detect_loop(
    graph: &PoseGraph,
    keyframes: &BTreeMap<usize, Keyframe>,
    query: &Keyframe,
    stamp: f64,
    m: &MappingConfig,
) -> Option<LocalizationFix> {
    let id = query.node_id;
    let here = graph.node(id).ok()?.pose.translation.vector;
    let filter: BTreeSet<usize> = keyframes
        .keys()
        .copied()
        .filter(|&n| n + m.min_loop_separation <= id)
        .filter(|&n| (graph.nodes()[n].pose.translation.vector - here).norm() <= m.loop_search_radius)
        .collect();
    if filter.is_empty() {
        return None;
    }
    let map: Vec<Keyframe> = filter.iter().map(|n| keyframes[n].clone()).collect();
    let params = RetrievalParams { matching: m.verify.matching.clone(), node_filter: None };
    let cands = localization::retrieve_candidates(query, &map, m.loop_candidates, &params).ok()?;
    cands.into_iter().find_map(|(n, _)| {
        let fix = localization::verify_and_fix(query, stamp, &keyframes[&n], &graph.nodes()[n].pose, &m.verify)?;
        Some(fix)
    })
}

pub fn fuse(cfg: &PipelineConfig, map: &MapResult) -> Result<FusionOutput<f64>, PipelineError> {
    Ok(fusion::fuse_all_rooms(&map.graph, &map.submaps, &cfg.fusion)?)
}

/// Scores a fused map with the step-height method and the normals baseline,
/// writing both as layers.
pub fn score(
    cfg: &PipelineConfig,
    grid: &MultiLayerGrid<f64>,
) -> Result<(MultiLayerGrid<f64>, TraversabilityMap<f64>, TraversabilityMap<f64>), PipelineError> {
    let step = traversability::score_map(grid, &cfg.traversability.step)
        .map_err(|e| PipelineError::Config(e.to_string()))?;
    let normals = traversability::normals_baseline(grid, &cfg.traversability.normals)
        .map_err(|e| PipelineError::Config(e.to_string()))?;
    let mut out = grid.clone();
    step.write_into(&mut out).map_err(|e| PipelineError::Data(e.to_string()))?;
    if out.layer(NORMALS_SCORE).is_ok() {
        out.remove_layer(NORMALS_SCORE).map_err(|e| PipelineError::Data(e.to_string()))?;
    }
    out.insert_layer(NORMALS_SCORE, normals.scores.clone()).map_err(|e| PipelineError::Data(e.to_string()))?;
    Ok((out, step, normals))
}

/// Reference labels from the scene heightfield: a cell is untraversable when
/// the analytic maximum height difference within the stride radius exceeds
/// the step height. Cells off the scene are unlabeled.
pub fn scene_labels(scene: &Scene, grid: &MultiLayerGrid<f64>, params: &TraversabilityParams) -> LabelGrid<f64> {
    let g = *grid.geometry();
    let heights: Vec<f64> = (0..g.len())
        .map(|i| {
            let [x, y] = g.center_unchecked(g.cell_of_linear(i));
            scene.height_at(x, y).unwrap_or(f64::NAN)
        })
        .collect();
    let mut truth = MultiLayerGrid::new(g, grid.frame());
    truth.elevation_mut().copy_from_slice(&heights);
    let exact = TraversabilityParams { min_support: 1, unknown_is_untraversable: false, ..*params };
    let scan = traversability::score_map(&truth, &exact).expect("validated parameters");
    let labels = heights
        .iter()
        .zip(&scan.scores)
        .enumerate()
        .map(|(i, (h, s))| {
            if h.is_nan() {
                return None;
            }
            let c = g.cell_of_linear(i);
            let h_max = traversability::max_height_diff(&truth, c, params.stride_radius).ok()?.max_diff;
            debug_assert!(!s.is_nan());
            Some(h_max <= params.step_height)
        })
        .collect();
    LabelGrid { geometry: g, labels }
}

/// Precision/recall sweeps for the step-height method and the normals baseline.
pub fn evaluate_traversability(
    cfg: &PipelineConfig,
    scene: &Scene,
    grid: &MultiLayerGrid<f64>,
) -> Result<(ClassificationReport, ClassificationReport), PipelineError> {
    let (_, step, normals) = score(cfg, grid)?;
    let labels = scene_labels(scene, grid, &cfg.traversability.step);
    let th = traversability::uniform_thresholds(cfg.traversability.threshold_steps);
    let a = traversability::evaluate_classification(&step, &labels, &th).map_err(|e| PipelineError::Data(e.to_string()))?;
    let b = traversability::evaluate_classification(&normals, &labels, &th)
        .map_err(|e| PipelineError::Data(e.to_string()))?;
    Ok((a, b))
}

/// Reconstruction error of a fused map against the scene surface below it.
pub fn evaluate_reconstruction(
    cfg: &PipelineConfig,
    scene: &Scene,
    grid: &MultiLayerGrid<f64>,
) -> Result<ReconError, PipelineError> {
    let e = &cfg.evaluation;
    let mesh = evaluation::heightmap_to_mesh(grid)?;
    let filter = e.steep_filter.then_some(e.steep_angle_deg);
    let sampled = evaluation::sample_mesh(&mesh, e.sample_density, cfg.seed, filter)?;
    let (mut lo, mut hi) = ([f64::INFINITY; 3], [f64::NEG_INFINITY; 3]);
    for v in mesh.vertices() {
        for k in 0..3 {
            lo[k] = lo[k].min(v[k]);
            hi[k] = hi[k].max(v[k]);
        }
    }
    let pad = 0.1;
    let surface = scene.visible_surface(|c| {
        c.x >= lo[0] - pad && c.x <= hi[0] + pad && c.y >= lo[1] - pad && c.y <= hi[1] + pad && c.z <= hi[2] + pad
    });
    let clipped = clip_mesh(&surface, [lo[0] - pad, lo[1] - pad], [hi[0] + pad, hi[1] + pad], hi[2] + pad);
    let gt = evaluation::sample_mesh(&clipped, e.ground_truth_density, cfg.seed ^ 0x9e37_79b9, None)?;
    Ok(evaluation::point_to_point_error(&sampled, &gt)?)
}

/// Keeps the triangles of `mesh` whose centroid lies within the box.
fn clip_mesh(mesh: &evaluation::TriMesh, lo: [f64; 2], hi: [f64; 2], z_max: f64) -> evaluation::TriMesh {
    let tris: Vec<[usize; 3]> = (0..mesh.triangles().len())
        .filter(|&i| {
            let [a, b, c] = mesh.corners(i);
            let m = (a.coords + b.coords + c.coords) / 3.0;
            m.x >= lo[0] && m.x <= hi[0] && m.y >= lo[1] && m.y <= hi[1] && m.z <= z_max
        })
        .map(|i| mesh.triangles()[i])
        .collect();
    evaluation::TriMesh::new(mesh.vertices().to_vec(), tris).expect("subset of a valid mesh")
}

#[derive(Debug, Clone)]
pub struct LocalizeResult {
    pub fixes: Vec<LocalizationFix>,
    /// Frame index of each fix.
    pub fix_frames: Vec<usize>,
    pub attempts: usize,
    /// Odometry mapped through the latest correction at every frame.
    pub localized: Trajectory,
}

/// Relocalizes a live run against a prior keyframe map, attempting a fix
/// every `fix_spacing` meters of odometry.
pub fn localize(
    cfg: &PipelineConfig,
    map_graph: &PoseGraph,
    map_keyframes: &BTreeMap<usize, Keyframe>,
    odometry: &Trajectory,
    frames: &[SimFrame],
) -> Result<LocalizeResult, PipelineError> {
    if map_keyframes.is_empty() {
        return Err(PipelineError::Data("prior map has no keyframes".into()));
    }
    if frames.len() != odometry.len() {
        return Err(PipelineError::Data("frames and odometry differ in length".into()));
    }
    let l = &cfg.localization;
    let mut correction = MapCorrection::default();
    let mut out = LocalizeResult { fixes: Vec::new(), fix_frames: Vec::new(), attempts: 0, localized: Trajectory::default() };
    let mut entries = Vec::with_capacity(odometry.len());
    let mut since = f64::INFINITY;
    let mut prev: Option<Pose> = None;
    for (i, ((stamp, odom), frame)) in odometry.entries().iter().zip(frames).enumerate() {
        if let Some(p) = prev {
            since += (odom.translation.vector - p.translation.vector).norm();
        }
        prev = Some(*odom);
        if since >= l.fix_spacing {
            if let Some(query) = &frame.keyframe {
                since = 0.0;
                out.attempts += 1;
                let predicted = correction.localized_pose(odom).translation.vector;
                let filter: BTreeSet<usize> = map_keyframes
                    .keys()
                    .copied()
                    .filter(|n| {
                        map_graph
                            .node(*n)
                            .map_or(false, |nd| (nd.pose.translation.vector - predicted).norm() <= l.search_radius)
                    })
                    .collect();
                let params = RetrievalParams { matching: l.verify.matching.clone(), node_filter: Some(filter) };
                let map: Vec<Keyframe> = map_keyframes.values().cloned().collect();
                let cands = localization::retrieve_candidates(query, &map, l.candidates, &params)
                    .map_err(|e| PipelineError::Data(e.to_string()))?;
                let fix = cands.into_iter().find_map(|(n, _)| {
                    let pose = map_graph.node(n).ok()?.pose;
                    localization::verify_and_fix(query, *stamp, &map_keyframes[&n], &pose, &l.verify)
                });
                if let Some(fix) = fix {
                    correction = correction
                        .update(&fix, odom, *stamp, l.stale_window)
                        .map_err(|e| PipelineError::Numerical(e.to_string()))?;
                    out.fixes.push(fix);
                    out.fix_frames.push(i);
                }
            }
        }
        entries.push((*stamp, correction.localized_pose(odom)));
    }
    out.localized = Trajectory::new(entries).map_err(|e| PipelineError::Numerical(e.to_string()))?;
    Ok(out)
}

pub fn evaluate_rpe(cfg: &PipelineConfig, est: &Trajectory, gt: &Trajectory) -> Result<Vec<RpeResult>, PipelineError> {
    cfg.evaluation.rpe_distances.iter().map(|&d| Ok(evaluation::rpe(est, gt, d)?)).collect()
}

/// Fraction of the union covered by both: known cells of `grid` versus the
/// lattice cells whose centers lie inside `polygon`.
pub fn coverage_iou(grid: &MultiLayerGrid<f64>, polygon: &[[f64; 2]]) -> f64 {
    let g = grid.geometry();
    let res = g.resolution();
    let [ox, oy] = g.origin();
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in polygon {
        for k in 0..2 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let col = |x: f64| ((x - ox) / res).round() as i64;
    let row = |y: f64| ((y - oy) / res).round() as i64;
    let (c0, c1) = (col(lo[0]).min(0), col(hi[0]).max(g.cols() as i64 - 1));
    let (r0, r1) = (row(lo[1]).min(0), row(hi[1]).max(g.rows() as i64 - 1));
    let (mut inter, mut union) = (0usize, 0usize);
    for r in r0..=r1 {
        for c in c0..=c1 {
            let (x, y) = (ox + c as f64 * res, oy + r as f64 * res);
            let inside = simworld::polygon_contains(polygon, [x, y]);
            let known = r >= 0
                && c >= 0
                && (r as usize) < g.rows()
                && (c as usize) < g.cols()
                && !grid.elevation()[g.linear(CellIndex { row: r as usize, col: c as usize })].is_nan();
            inter += (inside && known) as usize;
            union += (inside || known) as usize;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Ground-truth room index of a fused map: the room containing most of the
/// map's node positions.
pub fn dominant_room(scene: &Scene, graph: &PoseGraph, nodes: &[usize], gt: &Trajectory, node_frames: &[usize]) -> Option<usize> {
    let mut votes: BTreeMap<usize, usize> = BTreeMap::new();
    for &n in nodes {
        let _ = graph.node(n).ok()?;
        let p = gt.entries()[node_frames[n]].1.translation.vector;
        if let Some(r) = scene.room_at(p.x, p.y, p.z) {
            *votes.entry(r).or_default() += 1;
        }
    }
    votes.into_iter().max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0))).map(|v| v.0)
}

/// Node positions of `graph` as points.
pub fn node_positions(graph: &PoseGraph) -> Vec<Point3<f64>> {
    graph.nodes().iter().map(|n| Point3::from(n.pose.translation.vector)).collect()
}

/// Odometry factors kept, loop closures counted, for reporting.
pub fn factor_counts(graph: &PoseGraph) -> (usize, usize) {
    let odo = graph.factors().iter().filter(|f| f.kind == FactorKind::Odometry).count();
    (odo, graph.factors().len() - odo)
}

/// Default odometry information, re-exported for configuration docs.
pub fn odometry_information() -> Matrix6<f64> {
    posegraph::default_odometry_information()
}

/// Returns the traversability layer of a scored grid.
pub fn traversability_layer(grid: &MultiLayerGrid<f64>) -> Option<&[f64]> {
    grid.layer(TRAVERSABILITY).ok()
}
