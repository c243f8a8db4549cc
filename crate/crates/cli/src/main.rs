use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stridemap::artifacts::{self, RunDir};
use stridemap::evaluation;
use stridemap::localization;
use stridemap::pipeline::{self, PipelineConfig, PipelineError};
use stridemap::scenarios;
use stridemap::traversability;

#[derive(Parser)]
#[command(name = "stridemap", version, about = "Room-based terrain mapping, traversability and relocalization on simulated walks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the scene, trajectories, clouds, keyframes and room labels.
    Simulate(Common),
    /// Build the pose graph with submaps and keyframes from the simulated streams.
    Map(Common),
    /// Fuse submaps into one terrain map per room instance.
    Fuse(Common),
    /// Score fused maps with the step-height method and the normals baseline.
    Traverse(Common),
    /// Relocalize the run against a prior keyframe map.
    Localize(Common),
    /// Relative pose error of an estimate against ground truth.
    EvalRpe(Common),
    /// Point-to-point error of fused maps against the scene surface.
    EvalRecon(Common),
    /// Precision/recall sweep of traversability against scene labels.
    EvalTrav(Common),
}

#[derive(Args)]
struct Common {
    /// Pipeline configuration (TOML). Defaults to `<out>/config.toml` when
    /// present, else the staircase scenario.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Global seed, overriding the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

impl Common {
    fn load(&self) -> Result<(PipelineConfig, RunDir), PipelineError> {
        let run = RunDir::new(&self.out);
        let mut cfg = match &self.config {
            Some(p) => artifacts::load_config(p)?,
            None if run.config().exists() => artifacts::load_config(&run.config())?,
            None => scenarios::staircase(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok((cfg, run))
    }
}

fn require(path: &Path, stage: &str) -> Result<(), PipelineError> {
    if path.exists() {
        Ok(())
    } else {
        Err(PipelineError::Data(format!("{} not found; run `{stage}` first", path.display())))
    }
}

fn simulate(c: &Common) -> Result<(), PipelineError> {
    let (cfg, run) = c.load()?;
    let sim = pipeline::simulate(&cfg)?;
    artifacts::write_config(&run, &cfg)?;
    artifacts::write_simulation(&run, &sim)?;
    println!(
        "simulated {} frames over {:.2} m into {}",
        sim.frames.len(),
        sim.ground_truth.path_length(),
        run.sim().display()
    );
    Ok(())
}

fn map(c: &Common) -> Result<(), PipelineError> {
    let (cfg, run) = c.load()?;
    require(&run.sim(), "simulate")?;
    let sim = artifacts::read_simulation(&run)?;
    let map = pipeline::build_map(&cfg, &sim.odometry, &sim.frames, &sim.labels, &sim.classes)?;
    artifacts::write_map(&run, &map)?;
    println!(
        "mapped {} nodes, {} submaps, {} loop closures into {}",
        map.graph.len(),
        map.submaps.len(),
        map.loop_closures,
        run.map().display()
    );
    Ok(())
}

fn fuse(c: &Common) -> Result<(), PipelineError> {
    let (cfg, run) = c.load()?;
    require(&run.map(), "map")?;
    let map = artifacts::read_map(&run.map())?;
    let out = pipeline::fuse(&cfg, &map)?;
    artifacts::write_rooms(&run.fused(), &out.maps)?;
    let mut csv = String::from("room_id,class,nodes,known_cells\n");
    for m in &out.maps {
        csv.push_str(&format!("{},{},{},{}\n", m.room_id, m.class_name, m.nodes.len(), m.grid.known_count()));
    }
    artifacts::write_file(&run.fused().join("rooms.csv"), &csv)?;
    println!("fused {} room maps ({} skipped) into {}", out.maps.len(), out.skipped_rooms.len(), run.fused().display());
    Ok(())
}

fn traverse(c: &Common) -> Result<(), PipelineError> {
    let (cfg, run) = c.load()?;
    require(&run.fused(), "fuse")?;
    let rooms = artifacts::read_rooms(&run.fused())?;
    let mut scored = Vec::with_capacity(rooms.len());
    for mut r in rooms {
        r.grid = pipeline::score(&cfg, &r.grid)?.0;
        scored.push(r);
    }
    artifacts::write_rooms(&run.traverse(), &scored)?;
    println!("scored {} room maps into {}", scored.len(), run.traverse().display());
    Ok(())
}

fn localize(c: &Common) -> Result<(), PipelineError> {
    let (cfg, run) = c.load()?;
    let map_dir = match &cfg.localization.prior_map {
        Some(p) => {
            let dir = run.root.join(p).join("map");
            if !dir.exists() {
                return Err(PipelineError::Config(format!("prior map {} does not exist", dir.display())));
            }
            dir
        }
        None => run.map(),
    };
    require(&map_dir, "map")?;
    require(&run.sim(), "simulate")?;
    let prior = artifacts::read_map(&map_dir)?;
    let sim = artifacts::read_simulation(&run)?;
    let res = pipeline::localize(&cfg, &prior.graph, &prior.keyframes, &sim.odometry, &sim.frames)?;
    let dir = run.localize();
    artifacts::write_file(&dir.join("fixes.csv"), &artifacts::csv_string(|w| localization::write_fix_log(&res.fixes, w)))?;
    artifacts::write_trajectory(&dir.join("localized.tum"), &res.localized)?;
    let dist = sim.odometry.path_length();
    artifacts::write_file(
        &dir.join("summary.csv"),
        &format!("attempts,fixes,distance,meters_per_fix\n{},{},{},{}\n", res.attempts, res.fixes.len(), dist, dist / res.fixes.len().max(1) as f64),
    )?;
    println!("{} fixes from {} attempts over {:.2} m into {}", res.fixes.len(), res.attempts, dist, dir.display());
    Ok(())
}

fn eval_rpe(c: &Common) -> Result<(), PipelineError> {
    let (cfg, run) = c.load()?;
    let est_path = run.root.join(&cfg.evaluation.rpe_estimate);
    if !est_path.exists() {
        return Err(PipelineError::Config(format!("rpe estimate {} does not exist", est_path.display())));
    }
    let gt_path = run.sim().join("gt.tum");
    require(&gt_path, "simulate")?;
    let est = artifacts::read_trajectory(&est_path)?;
    let gt = artifacts::read_trajectory(&gt_path)?;
    let results = pipeline::evaluate_rpe(&cfg, &est, &gt)?;
    let csv = artifacts::csv_string(|w| evaluation::write_rpe_csv(&results, w));
    artifacts::write_file(&run.eval().join("rpe.csv"), &csv)?;
    for r in &results {
        println!("rpe @ {} m: translation {:.4} m, rotation {:.4} deg over {} pairs", r.distance, r.translation_rmse, r.rotation_rmse, r.pair_count);
    }
    Ok(())
}

fn eval_recon(c: &Common) -> Result<(), PipelineError> {
    let (cfg, run) = c.load()?;
    require(&run.fused(), "fuse")?;
    let scene = artifacts::read_scene(&run)?;
    let rooms = artifacts::read_rooms(&run.fused())?;
    let mut csv = String::from("room_id,class,mean_cm,max_cm,p90_cm,sample_count\n");
    for r in &rooms {
        let e = pipeline::evaluate_reconstruction(&cfg, &scene, &r.grid)?;
        csv.push_str(&format!("{},{},{},{},{},{}\n", r.room_id, r.class_name, e.mean, e.max, e.p90, e.sample_count));
        println!("room {} ({}): mean {:.3} cm, p90 {:.3} cm, max {:.3} cm", r.room_id, r.class_name, e.mean, e.p90, e.max);
    }
    artifacts::write_file(&run.eval().join("recon.csv"), &csv)
}

fn eval_trav(c: &Common) -> Result<(), PipelineError> {
    let (cfg, run) = c.load()?;
    require(&run.fused(), "fuse")?;
    let scene = artifacts::read_scene(&run)?;
    let rooms = artifacts::read_rooms(&run.fused())?;
    let mut summary = String::from("room_id,class,method,best_threshold,best_f,evaluated,unscored\n");
    for r in &rooms {
        let (step, normals) = pipeline::evaluate_traversability(&cfg, &scene, &r.grid)?;
        for (name, rep) in [("step", &step), ("normals", &normals)] {
            let csv = artifacts::csv_string(|w| traversability::write_report_csv(rep, w));
            artifacts::write_file(&run.eval().join(format!("trav_room_{:03}_{name}.csv", r.room_id)), &csv)?;
            summary.push_str(&format!(
                "{},{},{name},{},{},{},{}\n",
                r.room_id, r.class_name, rep.best_threshold, rep.best_f, rep.evaluated, rep.unscored
            ));
            println!("room {} ({}) {name}: best F {:.4} at {:.2}", r.room_id, r.class_name, rep.best_f, rep.best_threshold);
        }
    }
    artifacts::write_file(&run.eval().join("trav_summary.csv"), &summary)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate(c) => simulate(c),
        Command::Map(c) => map(c),
        Command::Fuse(c) => fuse(c),
        Command::Traverse(c) => traverse(c),
        Command::Localize(c) => localize(c),
        Command::EvalRpe(c) => eval_rpe(c),
        Command::EvalRecon(c) => eval_recon(c),
        Command::EvalTrav(c) => eval_trav(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
