//! On-disk layout of a pipeline run.
//!
//! ```text
//! <out>/config.toml             resolved configuration
//! <out>/sim/                    scene.toml, scene_mesh.ply, gt.tum, odom.tum,
//!                               frames.csv, labels.csv, clouds/, keyframes/
//! <out>/map/                    graph.jsonl, classes.json, nodes.csv,
//!                               submaps.csv, submaps/, keyframes/, report.csv
//! <out>/fused/                  room_NNN.grid + room_NNN.json
//! <out>/traverse/               room_NNN.grid with score layers
//! <out>/localize/               fixes.csv, localized.tum, summary.csv
//! <out>/eval/                   rpe.csv, recon.csv, trav_*.csv
//! ```

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::fusion::{RoomMetadata, RoomTerrainMap, Submap};
use crate::gridmap::{self, Frame};
use crate::localization::{self, Keyframe};
use crate::pipeline::{MapResult, PipelineConfig, PipelineError, SimFrame, Simulation};
use crate::pointcloud::{self, PointCloud};
use crate::posegraph::PoseGraph;
use crate::se3;
use crate::simworld::{self, NodeLabel, Scene, SceneSpec};
use crate::trajectory::{self, Trajectory};

fn data_err<E: Display>(path: &Path) -> impl Fn(E) -> PipelineError + '_ {
    move |e| PipelineError::Data(format!("{}: {e}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>, PipelineError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(data_err(dir))?;
    }
    File::create(path).map(BufWriter::new).map_err(data_err(path))
}

fn open(path: &Path) -> Result<BufReader<File>, PipelineError> {
    File::open(path).map(BufReader::new).map_err(data_err(path))
}

fn read_text(path: &Path) -> Result<String, PipelineError> {
    fs::read_to_string(path).map_err(data_err(path))
}

fn write_text(path: &Path, text: &str) -> Result<(), PipelineError> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes()).and_then(|_| w.flush()).map_err(data_err(path))
}

/// Loads a configuration file, resolving `scene_file` relative to it.
pub fn load_config(path: &Path) -> Result<PipelineConfig, PipelineError> {
    let text = fs::read_to_string(path)
        .map_err(|e| PipelineError::Config(format!("cannot read config {}: {e}", path.display())))?;
    let mut cfg = PipelineConfig::from_toml(&text)
        .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
    if let Some(rel) = cfg.scene_file.take() {
        let scene_path = path.parent().unwrap_or(Path::new(".")).join(&rel);
        let text = fs::read_to_string(&scene_path)
            .map_err(|e| PipelineError::Config(format!("cannot read scene file {}: {e}", scene_path.display())))?;
        cfg.scene = toml::from_str::<SceneSpec>(&text)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", scene_path.display())))?;
    }
    Ok(cfg)
}

/// Paths of one run rooted at `root`.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn sim(&self) -> PathBuf {
        self.root.join("sim")
    }

    pub fn map(&self) -> PathBuf {
        self.root.join("map")
    }

    pub fn fused(&self) -> PathBuf {
        self.root.join("fused")
    }

    pub fn traverse(&self) -> PathBuf {
        self.root.join("traverse")
    }

    pub fn localize(&self) -> PathBuf {
        self.root.join("localize")
    }

    pub fn eval(&self) -> PathBuf {
        self.root.join("eval")
    }
}

pub fn write_config(run: &RunDir, cfg: &PipelineConfig) -> Result<(), PipelineError> {
    write_text(&run.config(), &cfg.to_toml())
}

pub fn write_trajectory(path: &Path, traj: &Trajectory) -> Result<(), PipelineError> {
    let mut w = create(path)?;
    trajectory::write_tum(traj, &mut w).and_then(|_| w.flush()).map_err(data_err(path))
}

pub fn read_trajectory(path: &Path) -> Result<Trajectory, PipelineError> {
    trajectory::read_tum(open(path)?).map_err(data_err(path))
}

fn write_keyframe_file(path: &Path, kf: &Keyframe) -> Result<(), PipelineError> {
    let mut w = create(path)?;
    localization::write_keyframe(kf, &mut w).map_err(data_err(path))?;
    w.flush().map_err(data_err(path))
}

fn read_keyframe_file(path: &Path) -> Result<Keyframe, PipelineError> {
    localization::read_keyframe(open(path)?).map_err(data_err(path))
}

pub fn write_simulation(run: &RunDir, sim: &Simulation) -> Result<(), PipelineError> {
    let dir = run.sim();
    let spec = toml::to_string(sim.scene.spec()).map_err(|e| PipelineError::Data(e.to_string()))?;
    write_text(&dir.join("scene.toml"), &spec)?;
    let mesh_path = dir.join("scene_mesh.ply");
    let mut w = create(&mesh_path)?;
    sim.scene.mesh().write_ply(&mut w).map_err(data_err(&mesh_path))?;
    w.flush().map_err(data_err(&mesh_path))?;
    write_trajectory(&dir.join("gt.tum"), &sim.ground_truth)?;
    write_trajectory(&dir.join("odom.tum"), &sim.odometry)?;

    let mut frames = String::from("index,stamp,cloud,keyframe\n");
    for f in &sim.frames {
        let cloud = f.cloud.as_ref().map(|_| format!("clouds/frame_{:05}.ply", f.index));
        let kf = f.keyframe.as_ref().map(|_| format!("keyframes/frame_{:05}.kf", f.index));
        if let (Some(c), Some(rel)) = (&f.cloud, &cloud) {
            let p = dir.join(rel);
            let mut w = create(&p)?;
            pointcloud::write_ply_binary(&c.points, &mut w).map_err(data_err(&p))?;
            w.flush().map_err(data_err(&p))?;
        }
        if let (Some(k), Some(rel)) = (&f.keyframe, &kf) {
            write_keyframe_file(&dir.join(rel), k)?;
        }
        frames.push_str(&format!(
            "{},{},{},{}\n",
            f.index,
            f.stamp,
            cloud.unwrap_or_default(),
            kf.unwrap_or_default()
        ));
    }
    write_text(&dir.join("frames.csv"), &frames)?;

    let mut labels = format!("index,room,mislabeled,{}\n", sim.classes.join(","));
    for (i, l) in sim.labels.iter().enumerate() {
        let room = l.room.map(|r| r.to_string()).unwrap_or_default();
        let probs: Vec<String> = l.distribution.iter().map(|(_, p)| p.to_string()).collect();
        labels.push_str(&format!("{i},{room},{},{}\n", l.mislabeled as u8, probs.join(",")));
    }
    write_text(&dir.join("labels.csv"), &labels)
}

fn csv_rows(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>), PipelineError> {
    let text = read_text(path)?;
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| PipelineError::Data(format!("{}: empty file", path.display())))?
        .split(',')
        .map(str::to_string)
        .collect();
    let rows: Vec<Vec<String>> = lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect();
    for (k, r) in rows.iter().enumerate() {
        if r.len() != header.len() {
            return Err(PipelineError::Data(format!("{}: row {} has {} fields", path.display(), k + 2, r.len())));
        }
    }
    Ok((header, rows))
}

fn parse<T: std::str::FromStr>(path: &Path, s: &str) -> Result<T, PipelineError> {
    s.parse().map_err(|_| PipelineError::Data(format!("{}: cannot parse `{s}`", path.display())))
}

/// Rebuilds the simulated scene from `sim/scene.toml`.
pub fn read_scene(run: &RunDir) -> Result<Scene, PipelineError> {
    let scene_path = run.sim().join("scene.toml");
    let spec: SceneSpec = toml::from_str(&read_text(&scene_path)?).map_err(data_err(&scene_path))?;
    simworld::build_scene(&spec).map_err(data_err(&scene_path))
}

pub fn read_simulation(run: &RunDir) -> Result<Simulation, PipelineError> {
    let dir = run.sim();
    let scene = read_scene(run)?;
    let ground_truth = read_trajectory(&dir.join("gt.tum"))?;
    let odometry = read_trajectory(&dir.join("odom.tum"))?;

    let fpath = dir.join("frames.csv");
    let (_, rows) = csv_rows(&fpath)?;
    let mut frames = Vec::with_capacity(rows.len());
    for r in &rows {
        let index: usize = parse(&fpath, &r[0])?;
        let stamp: f64 = parse(&fpath, &r[1])?;
        let cloud = if r[2].is_empty() {
            None
        } else {
            let p = dir.join(&r[2]);
            let points = pointcloud::read_ply(open(&p)?).map_err(data_err(&p))?;
            Some(PointCloud::new(points, "sensor", stamp))
        };
        let keyframe = if r[3].is_empty() { None } else { Some(read_keyframe_file(&dir.join(&r[3]))?) };
        frames.push(SimFrame { index, stamp, cloud, keyframe });
    }

    let lpath = dir.join("labels.csv");
    let (header, rows) = csv_rows(&lpath)?;
    let classes: Vec<String> = header[3..].to_vec();
    let mut labels = Vec::with_capacity(rows.len());
    for r in &rows {
        let room = if r[1].is_empty() { None } else { Some(parse(&lpath, &r[1])?) };
        let mislabeled = r[2] == "1";
        let distribution = classes
            .iter()
            .zip(&r[3..])
            .map(|(c, p)| Ok((c.clone(), parse(&lpath, p)?)))
            .collect::<Result<_, PipelineError>>()?;
        labels.push(NodeLabel { room, distribution, mislabeled });
    }
    Ok(Simulation { scene, ground_truth, odometry, frames, labels, classes })
}

pub fn write_map(run: &RunDir, map: &MapResult) -> Result<(), PipelineError> {
    let dir = run.map();
    write_text(&dir.join("graph.jsonl"), &map.graph.to_jsonl())?;
    let classes = serde_json::to_string(map.graph.classes()).expect("serializable");
    write_text(&dir.join("classes.json"), &(classes + "\n"))?;
    let mut nodes = String::from("node,frame\n");
    for (n, f) in map.node_frames.iter().enumerate() {
        nodes.push_str(&format!("{n},{f}\n"));
    }
    write_text(&dir.join("nodes.csv"), &nodes)?;
    let mut index = String::from("node,tx,ty,tz,qx,qy,qz,qw\n");
    for (n, s) in &map.submaps {
        let p = dir.join(format!("submaps/node_{n:05}.grid"));
        let mut w = create(&p)?;
        gridmap::write_grid(&s.grid, &mut w).map_err(data_err(&p))?;
        w.flush().map_err(data_err(&p))?;
        let a = se3::to_array7(&s.capture_pose);
        index.push_str(&format!("{n},{},{},{},{},{},{},{}\n", a[0], a[1], a[2], a[3], a[4], a[5], a[6]));
    }
    write_text(&dir.join("submaps.csv"), &index)?;
    for (n, kf) in &map.keyframes {
        write_keyframe_file(&dir.join(format!("keyframes/node_{n:05}.kf")), kf)?;
    }
    let (iters, c0, c1) = map.report.as_ref().map_or((0, f64::NAN, f64::NAN), |r| {
        (r.iterations, r.initial_cost, r.final_cost)
    });
    let report = format!(
        "nodes,loop_closures,iterations,initial_cost,final_cost\n{},{},{},{},{}\n",
        map.graph.len(),
        map.loop_closures,
        iters,
        c0,
        c1
    );
    write_text(&dir.join("report.csv"), &report)
}

/// Reads a map directory written by `write_map`.
pub fn read_map(dir: &Path) -> Result<MapResult, PipelineError> {
    let cpath = dir.join("classes.json");
    let classes: Vec<String> = serde_json::from_str(&read_text(&cpath)?).map_err(data_err(&cpath))?;
    let gpath = dir.join("graph.jsonl");
    let graph = PoseGraph::from_jsonl(&read_text(&gpath)?, classes).map_err(data_err(&gpath))?;
    let npath = dir.join("nodes.csv");
    let (_, rows) = csv_rows(&npath)?;
    let node_frames = rows.iter().map(|r| parse(&npath, &r[1])).collect::<Result<Vec<usize>, _>>()?;
    let spath = dir.join("submaps.csv");
    let (_, rows) = csv_rows(&spath)?;
    let mut submaps = BTreeMap::new();
    for r in &rows {
        let n: usize = parse(&spath, &r[0])?;
        let a: Vec<f64> = r[1..8].iter().map(|v| parse(&spath, v)).collect::<Result<_, _>>()?;
        let capture_pose = se3::from_array7(&[a[0], a[1], a[2], a[3], a[4], a[5], a[6]])
            .ok_or_else(|| PipelineError::Data(format!("{}: invalid pose for node {n}", spath.display())))?;
        let p = dir.join(format!("submaps/node_{n:05}.grid"));
        let grid = gridmap::read_grid(open(&p)?, Frame::Odom).map_err(data_err(&p))?;
        submaps.insert(n, Submap { grid, capture_node: n, capture_pose });
    }
    let mut keyframes = BTreeMap::new();
    for node in graph.nodes() {
        if node.keyframe.is_some() {
            let p = dir.join(format!("keyframes/node_{:05}.kf", node.id));
            keyframes.insert(node.id, read_keyframe_file(&p)?);
        }
    }
    let loop_closures = pipeline_loop_count(&graph);
    Ok(MapResult { graph, submaps, keyframes, node_frames, loop_closures, report: None })
}

fn pipeline_loop_count(graph: &PoseGraph) -> usize {
    crate::pipeline::factor_counts(graph).1
}

pub fn write_rooms(dir: &Path, maps: &[RoomTerrainMap<f64>]) -> Result<(), PipelineError> {
    for m in maps {
        let p = dir.join(format!("room_{:03}.grid", m.room_id));
        let mut w = create(&p)?;
        gridmap::write_grid(&m.grid, &mut w).map_err(data_err(&p))?;
        w.flush().map_err(data_err(&p))?;
        let meta = serde_json::to_string_pretty(&m.metadata()).expect("serializable");
        write_text(&dir.join(format!("room_{:03}.json", m.room_id)), &(meta + "\n"))?;
    }
    Ok(())
}

/// Reads every `room_NNN.grid` / `.json` pair in `dir`, ordered by room id.
pub fn read_rooms(dir: &Path) -> Result<Vec<RoomTerrainMap<f64>>, PipelineError> {
    let mut metas = Vec::new();
    for entry in fs::read_dir(dir).map_err(data_err(dir))? {
        let p = entry.map_err(data_err(dir))?.path();
        if p.extension().is_some_and(|e| e == "json") {
            let meta: RoomMetadata = serde_json::from_str(&read_text(&p)?).map_err(data_err(&p))?;
            metas.push(meta);
        }
    }
    if metas.is_empty() {
        return Err(PipelineError::Data(format!("{}: no room maps", dir.display())));
    }
    metas.sort_by_key(|m| m.room_id);
    metas
        .into_iter()
        .map(|m| {
            let frame: Frame = m.frame.parse().map_err(|e: String| PipelineError::Data(e))?;
            let p = dir.join(format!("room_{:03}.grid", m.room_id));
            let grid = gridmap::read_grid(open(&p)?, frame).map_err(data_err(&p))?;
            Ok(RoomTerrainMap { room_id: m.room_id, class_name: m.class_name, nodes: m.nodes, grid })
        })
        .collect()
}

/// Writes `text` to `path`, creating parent directories.
pub fn write_file(path: &Path, text: &str) -> Result<(), PipelineError> {
    write_text(path, text)
}

/// Renders CSV output of a writer callback into a string.
pub fn csv_string(f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> String {
    let mut buf = Vec::new();
    f(&mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("utf-8 csv")
}
