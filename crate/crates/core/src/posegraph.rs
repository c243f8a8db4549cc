//! Semantic pose graph: evenly spaced SE(3) nodes carrying room labels and
//! payload references, odometry and loop-closure factors, and a
//! Levenberg-Marquardt optimizer on the SE(3) manifold.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector, Matrix6, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::se3::{self, Pose};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("node pose is not a valid rigid transform")]
    InvalidPose,
    #[error("timestamp {stamp} precedes the last node stamp {last}")]
    NonMonotonicStamp { stamp: f64, last: f64 },
    #[error("unknown node id {0}")]
    UnknownNode(usize),
    #[error("a factor must connect two distinct nodes (got {0} -> {0})")]
    SelfLoop(usize),
    #[error("information matrix is not symmetric positive definite")]
    NotPositiveDefinite,
    #[error("graph is not connected: node {0} is unreachable from node 0")]
    Disconnected(usize),
    #[error("cost became non-finite during optimization")]
    NonFiniteCost,
    #[error("unknown room class `{0}`")]
    UnknownClass(String),
    #[error("room distribution sums to {0}, expected 1")]
    NotNormalized(f64),
    #[error("node {0} has no room label")]
    Unlabeled(usize),
    #[error("malformed graph record on line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Room class with its score and, optionally, the full distribution over the class list.
#[derive(Debug, Clone, PartialEq)]
pub struct RoomLabel {
    pub class_name: String,
    pub score: f64,
    /// Scores aligned with the graph's class list.
    pub distribution: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphNode {
    pub id: usize,
    pub pose: Pose,
    pub stamp: f64,
    pub room: Option<RoomLabel>,
    /// Storage key of the attached submap, if any.
    pub submap: Option<String>,
    /// Storage key of the attached keyframe, if any.
    pub keyframe: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorKind {
    Odometry,
    LoopClosure,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Factor {
    pub kind: FactorKind,
    pub from: usize,
    pub to: usize,
    /// Measured `pose_from^-1 * pose_to`.
    pub relative_pose: Pose,
    pub information: Matrix6<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpacingPolicy {
    pub translation: f64,
    pub rotation: f64,
}

impl Default for SpacingPolicy {
    fn default() -> Self {
        Self { translation: 1.0, rotation: 30f64.to_radians() }
    }
}

/// Payload references attached to a freshly created node.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NodePayload {
    pub submap: Option<String>,
    pub keyframe: Option<String>,
}

/// Default odometry information: 5 cm translational and 1 degree rotational standard deviation.
pub fn default_odometry_information() -> Matrix6<f64> {
    let t = 1.0 / (0.05f64 * 0.05);
    let r = 1.0 / 1f64.to_radians().powi(2);
    Matrix6::from_diagonal(&Vector6::new(t, t, t, r, r, r))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseGraph {
    nodes: Vec<GraphNode>,
    factors: Vec<Factor>,
    pub spacing: SpacingPolicy,
    pub odometry_information: Matrix6<f64>,
    classes: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizeReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
}

/// Room instance: maximal same-class runs merged by spatial overlap.
#[derive(Debug, Clone, PartialEq)]
pub struct RoomInstance {
    pub id: usize,
    pub class_name: String,
    pub nodes: Vec<usize>,
}

/// Margins used when testing whether two runs occupy the same space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoomGrouping {
    pub xy_margin: f64,
    pub z_margin: f64,
}

impl Default for RoomGrouping {
    fn default() -> Self {
        Self { xy_margin: 0.5, z_margin: 0.5 }
    }
}

pub fn is_spd(m: &Matrix6<f64>) -> bool {
    let sym = (m - m.transpose()).abs().max() <= 1e-9 * m.abs().max().max(1.0);
    sym && m.iter().all(|v| v.is_finite()) && m.symmetric_eigenvalues().iter().all(|&e| e > 0.0)
}

impl PoseGraph {
    pub fn new(classes: Vec<String>) -> Self {
        Self {
            nodes: Vec::new(),
            factors: Vec::new(),
            spacing: SpacingPolicy::default(),
            odometry_information: default_odometry_information(),
            classes,
        }
    }

    pub fn with_spacing(mut self, spacing: SpacingPolicy) -> Self {
        self.spacing = spacing;
        self
    }

    pub fn nodes(&self) -> &[GraphNode] {
        &self.nodes
    }

    pub fn node(&self, id: usize) -> Result<&GraphNode, GraphError> {
        self.nodes.get(id).ok_or(GraphError::UnknownNode(id))
    }

    pub fn node_mut(&mut self, id: usize) -> Result<&mut GraphNode, GraphError> {
        self.nodes.get_mut(id).ok_or(GraphError::UnknownNode(id))
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Appends a node unconditionally, chained to the previous one by odometry.
    pub fn add_node(&mut self, pose: Pose, stamp: f64, payload: NodePayload) -> Result<usize, GraphError> {
        if !se3::is_valid(&pose) {
            return Err(GraphError::InvalidPose);
        }
        if let Some(last) = self.nodes.last() {
            if !(stamp >= last.stamp) {
                return Err(GraphError::NonMonotonicStamp { stamp, last: last.stamp });
            }
        }
        let id = self.nodes.len();
        if let Some(prev) = self.nodes.last() {
            self.factors.push(Factor {
                kind: FactorKind::Odometry,
                from: prev.id,
                to: id,
                relative_pose: prev.pose.inverse() * pose,
                information: self.odometry_information,
            });
        }
        self.nodes.push(GraphNode {
            id,
            pose,
            stamp,
            room: None,
            submap: payload.submap,
            keyframe: payload.keyframe,
        });
        Ok(id)
    }

    /// Whether `pose` is far enough from the last node to warrant a new one.
    pub fn is_spaced(&self, pose: &Pose) -> bool {
        match self.nodes.last() {
            None => true,
            Some(last) => {
                let rel = last.pose.inverse() * pose;
                rel.translation.vector.norm() >= self.spacing.translation
                    || se3::rotation_angle(&rel) >= self.spacing.rotation
            }
        }
    }

    /// Creates a node when the spacing policy allows it.
    pub fn add_node_if_spaced(&mut self, pose: Pose, stamp: f64, payload: NodePayload) -> Result<Option<usize>, GraphError> {
        if !se3::is_valid(&pose) {
            return Err(GraphError::InvalidPose);
        }
        if let Some(last) = self.nodes.last() {
            if !(stamp >= last.stamp) {
                return Err(GraphError::NonMonotonicStamp { stamp, last: last.stamp });
            }
        }
        if !self.is_spaced(&pose) {
            return Ok(None);
        }
        self.add_node(pose, stamp, payload).map(Some)
    }

    /// Adds an arbitrary factor between existing nodes.
    pub fn add_factor(
        &mut self,
        kind: FactorKind,
        from: usize,
        to: usize,
        relative_pose: Pose,
        information: Matrix6<f64>,
    ) -> Result<usize, GraphError> {
        self.node(from)?;
        self.node(to)?;
        if from == to {
            return Err(GraphError::SelfLoop(from));
        }
        if !se3::is_valid(&relative_pose) {
            return Err(GraphError::InvalidPose);
        }
        if !is_spd(&information) {
            return Err(GraphError::NotPositiveDefinite);
        }
        self.factors.push(Factor { kind, from, to, relative_pose, information });
        Ok(self.factors.len() - 1)
    }

    pub fn add_loop_closure(
        &mut self,
        from: usize,
        to: usize,
        relative_pose: Pose,
        information: Matrix6<f64>,
    ) -> Result<usize, GraphError> {
        self.add_factor(FactorKind::LoopClosure, from, to, relative_pose, information)
    }

    fn residual(f: &Factor, xi: &Pose, xj: &Pose) -> Vector6<f64> {
        se3::log(&(f.relative_pose.inverse() * xi.inverse() * xj))
    }

    fn cost_of(&self, poses: &[Pose]) -> f64 {
        self.factors
            .iter()
            .map(|f| {
                let r = Self::residual(f, &poses[f.from], &poses[f.to]);
                (r.transpose() * f.information * r)[0]
            })
            .sum()
    }

    /// Sum over factors of `r^T * information * r`.
    pub fn cost(&self) -> f64 {
        let poses: Vec<Pose> = self.nodes.iter().map(|n| n.pose).collect();
        self.cost_of(&poses)
    }

    fn check_connected(&self) -> Result<(), GraphError> {
        let n = self.nodes.len();
        if n == 0 {
            return Ok(());
        }
        let mut adj = vec![Vec::new(); n];
        for f in &self.factors {
            adj[f.from].push(f.to);
            adj[f.to].push(f.from);
        }
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
        match seen.iter().position(|s| !s) {
            Some(i) => Err(GraphError::Disconnected(i)),
            None => Ok(()),
        }
    }

    /// Levenberg-Marquardt with node 0 held fixed.
    ///
    /// Damping starts at 1e-4 on the Hessian diagonal, shrinks tenfold on an
    /// accepted step and grows tenfold on a rejected one. Stops when the relative
    /// cost decrease falls below `tol` or after `max_iters` accepted steps.
    pub fn optimize(&mut self, max_iters: usize, tol: f64) -> Result<OptimizeReport, GraphError> {
        self.check_connected()?;
        let mut poses: Vec<Pose> = self.nodes.iter().map(|n| n.pose).collect();
        let initial_cost = self.cost_of(&poses);
        if !initial_cost.is_finite() {
            return Err(GraphError::NonFiniteCost);
        }
        let mut report = OptimizeReport { initial_cost, final_cost: initial_cost, iterations: 0 };
        let free = poses.len().saturating_sub(1);
        if free == 0 || initial_cost == 0.0 {
            return Ok(report);
        }
        let dim = 6 * free;
        let mut cost = initial_cost;
        let mut lambda = 1e-4;
        for _ in 0..max_iters {
            let mut h = DMatrix::<f64>::zeros(dim, dim);
            let mut b = DVector::<f64>::zeros(dim);
            for f in &self.factors {
                let (xi, xj) = (&poses[f.from], &poses[f.to]);
                let r = Self::residual(f, xi, xj);
                let jj = se3::right_jacobian_inv(&r) * se3::adjoint(&xj.inverse());
                let ji = -jj;
                let blocks = [(f.from, ji), (f.to, jj)];
                for &(a, ja) in &blocks {
                    if a == 0 {
                        continue;
                    }
                    let oa = 6 * (a - 1);
                    let jt_omega = ja.transpose() * f.information;
                    let mut bv = b.fixed_rows_mut::<6>(oa);
                    bv += jt_omega * r;
                    for &(c, jc) in &blocks {
                        if c == 0 {
                            continue;
                        }
                        let oc = 6 * (c - 1);
                        let mut hv = h.fixed_view_mut::<6, 6>(oa, oc);
                        hv += jt_omega * jc;
                    }
                }
            }
            let diag = h.diagonal();
            let mut accepted = None;
            while lambda < 1e16 {
                let mut damped = h.clone();
                for k in 0..dim {
                    damped[(k, k)] += lambda * diag[k].max(1e-12);
                }
                let Some(chol) = damped.cholesky() else {
                    lambda *= 10.0;
                    continue;
                };
                let delta = chol.solve(&(-&b));
                let candidate: Vec<Pose> = poses
                    .iter()
                    .enumerate()
                    .map(|(k, p)| {
                        if k == 0 {
                            *p
                        } else {
                            let d = delta.fixed_rows::<6>(6 * (k - 1)).into_owned();
                            se3::exp(&d) * p
                        }
                    })
                    .collect();
                let new_cost = self.cost_of(&candidate);
                if !new_cost.is_finite() {
                    return Err(GraphError::NonFiniteCost);
                }
                if new_cost < cost {
                    lambda = (lambda * 0.1).max(1e-12);
                    accepted = Some((candidate, new_cost));
                    break;
                }
                lambda *= 10.0;
            }
            let Some((candidate, new_cost)) = accepted else {
                break;
            };
            let rel = (cost - new_cost) / cost;
            poses = candidate;
            cost = new_cost;
            report.iterations += 1;
            if rel < tol || cost == 0.0 {
                break;
            }
        }
        for (n, p) in self.nodes.iter_mut().zip(poses) {
            n.pose = p;
        }
        report.final_cost = cost;
        Ok(report)
    }

    /// Stores the arg-max class (ties broken by class-list order) and the full distribution.
    pub fn assign_room_label(&mut self, node_id: usize, distribution: &[(&str, f64)]) -> Result<(), GraphError> {
        self.node(node_id)?;
        let mut dist = vec![0.0; self.classes.len()];
        for (name, p) in distribution {
            let k = self
                .classes
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| GraphError::UnknownClass(name.to_string()))?;
            dist[k] += p;
        }
        let total: f64 = dist.iter().sum();
        if !((total - 1.0).abs() <= 1e-6) || dist.iter().any(|p| !(*p >= 0.0)) {
            return Err(GraphError::NotNormalized(total));
        }
        let mut best = 0;
        for (k, p) in dist.iter().enumerate() {
            if *p > dist[best] {
                best = k;
            }
        }
        self.nodes[node_id].room = Some(RoomLabel {
            class_name: self.classes[best].clone(),
            score: dist[best],
            distribution: Some(dist),
        });
        Ok(())
    }

    /// Partitions nodes into room instances.
    ///
    /// Consecutive nodes with the same class form a run. A run joins the first
    /// earlier instance of the same class whose margin-inflated 3D bounding box
    /// overlaps its own with positive volume; otherwise it starts a new instance.
    pub fn group_nodes_by_room(&self, grouping: &RoomGrouping) -> Result<Vec<RoomInstance>, GraphError> {
        let mut runs: Vec<(String, Vec<usize>)> = Vec::new();
        for n in &self.nodes {
            let class = &n.room.as_ref().ok_or(GraphError::Unlabeled(n.id))?.class_name;
            match runs.last_mut() {
                Some((c, ids)) if c == class => ids.push(n.id),
                _ => runs.push((class.clone(), vec![n.id])),
            }
        }
        let bbox = |ids: &[usize]| {
            let mut lo = [f64::INFINITY; 3];
            let mut hi = [f64::NEG_INFINITY; 3];
            for &i in ids {
                let t = self.nodes[i].pose.translation.vector;
                for k in 0..3 {
                    lo[k] = lo[k].min(t[k]);
                    hi[k] = hi[k].max(t[k]);
                }
            }
            let m = [grouping.xy_margin, grouping.xy_margin, grouping.z_margin];
            for k in 0..3 {
                lo[k] -= m[k];
                hi[k] += m[k];
            }
            (lo, hi)
        };
        let overlaps = |a: &([f64; 3], [f64; 3]), b: &([f64; 3], [f64; 3])| {
            (0..3).all(|k| a.1[k].min(b.1[k]) - a.0[k].max(b.0[k]) > 0.0)
        };
        let mut instances: Vec<(RoomInstance, ([f64; 3], [f64; 3]))> = Vec::new();
        for (class, ids) in runs {
            let b = bbox(&ids);
            let hit = instances
                .iter()
                .position(|(inst, ib)| inst.class_name == class && overlaps(ib, &b));
            match hit {
                Some(k) => {
                    let (inst, ib) = &mut instances[k];
                    inst.nodes.extend(ids);
                    for a in 0..3 {
                        ib.0[a] = ib.0[a].min(b.0[a]);
                        ib.1[a] = ib.1[a].max(b.1[a]);
                    }
                }
                None => {
                    let id = instances.len();
                    instances.push((RoomInstance { id, class_name: class, nodes: ids }, b));
                }
            }
        }
        Ok(instances
            .into_iter()
            .map(|(mut inst, _)| {
                inst.nodes.sort_unstable();
                inst
            })
            .collect())
    }

    /// Serializes as JSON lines: all node records, then all factor records.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for n in &self.nodes {
            let rec = NodeRecord {
                id: n.id,
                stamp: n.stamp,
                pose: se3::to_array7(&n.pose),
                room: n.room.as_ref().map(|r| RoomRecord {
                    class: r.class_name.clone(),
                    score: r.score,
                    distribution: r
                        .distribution
                        .as_ref()
                        .map(|d| self.classes.iter().cloned().zip(d.iter().copied()).collect()),
                }),
                submap_path: n.submap.clone(),
                keyframe_path: n.keyframe.clone(),
            };
            out.push_str(&serde_json::to_string(&rec).expect("serializable"));
            out.push('\n');
        }
        for f in &self.factors {
            let rec = FactorRecord {
                kind: f.kind,
                from: f.from,
                to: f.to,
                rel_pose: se3::to_array7(&f.relative_pose),
                info: upper_triangle(&f.information),
            };
            out.push_str(&serde_json::to_string(&rec).expect("serializable"));
            out.push('\n');
        }
        out
    }

    /// Parses the JSON-lines form; `classes` is the class list used for label distributions.
    pub fn from_jsonl(text: &str, classes: Vec<String>) -> Result<Self, GraphError> {
        let mut g = PoseGraph::new(classes);
        let mut factors = Vec::new();
        for (k, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let perr = |msg: String| GraphError::Parse { line: k + 1, msg };
            let rec: Record = serde_json::from_str(line).map_err(|e| perr(e.to_string()))?;
            match rec {
                Record::Node(n) => {
                    if n.id != g.nodes.len() {
                        return Err(perr(format!("node ids must be dense, got {}", n.id)));
                    }
                    let pose = se3::from_array7(&n.pose).ok_or_else(|| perr("invalid pose".into()))?;
                    let room = match n.room {
                        None => None,
                        Some(r) => {
                            let distribution = match r.distribution {
                                None => None,
                                Some(d) => {
                                    let mut v = vec![0.0; g.classes.len()];
                                    for (name, p) in d {
                                        let i = g
                                            .classes
                                            .iter()
                                            .position(|c| *c == name)
                                            .ok_or_else(|| perr(format!("unknown class {name}")))?;
                                        v[i] = p;
                                    }
                                    Some(v)
                                }
                            };
                            Some(RoomLabel { class_name: r.class, score: r.score, distribution })
                        }
                    };
                    g.nodes.push(GraphNode {
                        id: n.id,
                        pose,
                        stamp: n.stamp,
                        room,
                        submap: n.submap_path,
                        keyframe: n.keyframe_path,
                    });
                }
                Record::Factor(f) => factors.push((k + 1, f)),
            }
        }
        for (line, f) in factors {
            let rel = se3::from_array7(&f.rel_pose)
                .ok_or_else(|| GraphError::Parse { line, msg: "invalid relative pose".into() })?;
            g.add_factor(f.kind, f.from, f.to, rel, from_upper_triangle(&f.info))?;
        }
        Ok(g)
    }
}

fn upper_triangle(m: &Matrix6<f64>) -> Vec<f64> {
    let mut v = Vec::with_capacity(21);
    for r in 0..6 {
        for c in r..6 {
            v.push(m[(r, c)]);
        }
    }
    v
}

fn from_upper_triangle(v: &[f64]) -> Matrix6<f64> {
    let mut m = Matrix6::zeros();
    let mut k = 0;
    for r in 0..6 {
        for c in r..6 {
            m[(r, c)] = v[k];
            m[(c, r)] = v[k];
            k += 1;
        }
    }
    m
}

#[derive(Debug, Serialize, Deserialize)]
struct RoomRecord {
    class: String,
    score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    distribution: Option<Vec<(String, f64)>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeRecord {
    id: usize,
    stamp: f64,
    pose: [f64; 7],
    room: Option<RoomRecord>,
    submap_path: Option<String>,
    keyframe_path: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FactorRecord {
    kind: FactorKind,
    from: usize,
    to: usize,
    rel_pose: [f64; 7],
    #[serde(with = "info21")]
    info: Vec<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum Record {
    Factor(FactorRecord),
    Node(NodeRecord),
}

mod info21 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let v = Vec::<f64>::deserialize(d)?;
        if v.len() != 21 {
            return Err(serde::de::Error::custom(format!("expected 21 information entries, got {}", v.len())));
        }
        Ok(v)
    }
}
