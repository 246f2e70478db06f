use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use mcdba::covis::{CovisGraph, Edge, FrameId, GraphError};
use mcdba::dba::InverseDepthField;
use mcdba::io::{self, Bundle, BundleManifest, IoError};
use mcdba::metrics::{ate, depth_metrics, format_report, median_scale, AteOptions, DepthPair};
use mcdba::pipeline::{run_sequence, DepthInit, Initializer, OracleProvider, PipelineError};
use mcdba::simulator::{make_rig, make_scene, oracle_targets, perturb_state, SimError};
use mcdba::Pose;
use serde::Serialize;

use crate::config::RunConfig;
use crate::{Common, Failure};

fn io_failure(e: IoError) -> Failure {
    if e.is_validation() {
        Failure::validation(e.to_string())
    } else {
        Failure::runtime(e.to_string())
    }
}

fn sim_failure(e: SimError) -> Failure {
    match e {
        SimError::InvalidSpec(_) => Failure::validation(e.to_string()),
        _ => Failure::runtime(e.to_string()),
    }
}

fn graph_failure(e: GraphError) -> Failure {
    match e {
        GraphError::InvalidParams(_) => Failure::validation(e.to_string()),
        _ => Failure::runtime(e.to_string()),
    }
}

fn pipeline_failure(e: PipelineError) -> Failure {
    match e {
        PipelineError::InvalidConfig(_) => Failure::validation(e.to_string()),
        PipelineError::Sim(s) => sim_failure(s),
        PipelineError::Graph(g) => graph_failure(g),
        other => Failure::runtime(other.to_string()),
    }
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    io::write_file(path, text.as_bytes()).map_err(io_failure)
}

pub fn simulate(common: &Common) -> Result<(), Failure> {
    let cfg = RunConfig::load(common.config.as_deref(), common.seed)?;
    let scene = make_scene(&cfg.rig, &cfg.trajectory, &cfg.depth, cfg.seed).map_err(sim_failure)?;
    let mut graph = CovisGraph::new(&scene.rig, cfg.graph).map_err(graph_failure)?;
    let mut edges = BTreeSet::new();
    for t in 0..scene.trajectory.len() {
        graph.update(t).map_err(graph_failure)?;
        edges.extend(graph.edges().iter().copied());
    }
    let edges: Vec<Edge> = edges.into_iter().collect();
    let targets = oracle_targets(&scene.rig, &scene.trajectory, &scene.depths, &edges, &cfg.noise).map_err(sim_failure)?;
    let manifest = BundleManifest {
        format: io::BUNDLE_FORMAT.into(),
        version: io::BUNDLE_VERSION,
        seed: cfg.seed,
        n_steps: scene.trajectory.len(),
        n_cameras: scene.rig.len(),
        width: cfg.rig.width as usize,
        height: cfg.rig.height as usize,
        n_edges: edges.len(),
        rig_file: "rig.toml".into(),
        trajectory_file: "trajectory.tum".into(),
        depth_dir: "depth".into(),
        edges_file: "edges.txt".into(),
        targets_dir: "targets".into(),
        rig: cfg.rig,
        trajectory: cfg.trajectory,
        depth: cfg.depth,
        noise: cfg.noise.clone(),
    };
    io::save_bundle(&common.out, &manifest, &scene, &targets).map_err(io_failure)?;
    write(&common.out.join("config.toml"), &toml::to_string(&cfg).expect("config serializes"))?;
    println!("simulate: {} steps, {} cameras, {} edges", manifest.n_steps, manifest.n_cameras, manifest.n_edges);
    Ok(())
}

#[derive(Serialize)]
struct SolutionSummary {
    seed: u64,
    keyframes: Vec<usize>,
    removed: Vec<usize>,
    rounds: usize,
    final_energy: f64,
}

pub fn solve(bundle_dir: &Path, common: &Common) -> Result<(), Failure> {
    let cfg = RunConfig::load(common.config.as_deref(), common.seed)?;
    let Bundle { manifest, scene, .. } = io::load_bundle(bundle_dir).map_err(io_failure)?;
    let mut noise = manifest.noise.clone();
    if let Some(s) = common.seed {
        noise.seed = s;
    }
    let mut poses: BTreeMap<usize, Pose> = scene.trajectory.iter().copied().enumerate().collect();
    let mut depths = scene.depths.clone();
    perturb_state(&mut poses, &mut depths, &BTreeSet::from([0]), &noise);
    let init = Initializer { poses, depths: DepthInit::Fields(depths) };
    let rig = scene.rig.clone();
    let provider = OracleProvider { scene, noise: noise.clone() };
    let (state, steps) =
        run_sequence(&rig, cfg.graph, &provider, &init, 0..manifest.n_steps, &cfg.dba, &cfg.pipeline).map_err(pipeline_failure)?;

    let out = &common.out;
    let traj: Vec<(usize, Pose)> = state.keyframes.iter().map(|t| (*t, state.poses[t])).collect();
    io::write_tum(&out.join("trajectory.tum"), &traj).map_err(io_failure)?;
    for t in &state.keyframes {
        for c in 0..rig.len() {
            let f = FrameId::new(*t, c);
            io::write_grid(&out.join("depth").join(io::depth_file_name(f)), &io::depth_to_grid(&state.depths[&f])).map_err(io_failure)?;
        }
    }
    write(&out.join("graph.txt"), &state.graph.dump())?;
    write(&out.join("rounds.jsonl"), &io::format_jsonl(&state.log))?;
    write(&out.join("steps.jsonl"), &io::format_jsonl(&steps))?;
    let summary = SolutionSummary {
        seed: noise.seed,
        keyframes: state.keyframes.clone(),
        removed: state.removed.clone(),
        rounds: state.log.len(),
        final_energy: state.log.last().map_or(0.0, |r| r.energy_after),
    };
    write(&out.join("solution.toml"), &toml::to_string(&summary).expect("summary serializes"))?;
    println!("solve: {} keyframes, {} removed, {} rounds, final energy {:.6e}", summary.keyframes.len(), summary.removed.len(), summary.rounds, summary.final_energy);
    Ok(())
}

pub fn eval(bundle_dir: &Path, solution: &Path, common: &Common) -> Result<(), Failure> {
    let cfg = RunConfig::load(common.config.as_deref(), common.seed)?;
    let bundle = io::load_bundle(bundle_dir).map_err(io_failure)?;
    let scene = &bundle.scene;
    let traj = io::read_tum(&solution.join("trajectory.tum")).map_err(io_failure)?;
    if traj.is_empty() {
        return Err(Failure::validation("solution trajectory is empty"));
    }
    let mut pred = Vec::new();
    let mut gt = Vec::new();
    let mut pred_depths: Vec<(FrameId, InverseDepthField)> = Vec::new();
    for (t, p) in &traj {
        let g = scene.trajectory.get(*t).ok_or_else(|| Failure::validation(format!("solution timestep {t} is not in the bundle")))?;
        pred.push(*p);
        gt.push(*g);
        for c in 0..scene.rig.len() {
            let f = FrameId::new(*t, c);
            let path = solution.join("depth").join(io::depth_file_name(f));
            let grid = io::read_grid(&path).map_err(io_failure)?;
            let d = io::grid_to_depth(&path, grid).map_err(io_failure)?;
            if d.len() != scene.depths[&f].len() {
                return Err(Failure::validation(format!("{}: size differs from the bundle", path.display())));
            }
            pred_depths.push((f, d));
        }
    }
    let traj_eval = ate(&pred, &gt, &AteOptions { umeyama: cfg.eval.umeyama }).map_err(|e| Failure::runtime(e.to_string()))?;
    let metric: Vec<(usize, Vec<f64>, Vec<f64>)> = pred_depths.iter().map(|(f, d)| (f.c, d.to_depth(), scene.depths[f].to_depth())).collect();
    let pairs: Vec<DepthPair<'_>> = metric.iter().map(|(c, p, g)| DepthPair { camera: *c, pred: p, gt: g, valid: None }).collect();
    let depth_eval = depth_metrics(&pairs, cfg.eval.max_depth).map_err(|e| Failure::runtime(e.to_string()))?;
    let scale = median_scale(&pairs, cfg.eval.max_depth).map_err(|e| Failure::runtime(e.to_string()))?;
    let mut report = String::new();
    let _ = writeln!(report, "frames: {}", traj.len());
    report.push_str(&format_report(Some(&depth_eval), Some(&traj_eval), Some(scale)));
    write(&common.out.join("metrics.txt"), &report)?;
    print!("{report}");
    Ok(())
}

pub fn graph(common: &Common) -> Result<(), Failure> {
    let cfg = RunConfig::load(common.config.as_deref(), common.seed)?;
    let rig = make_rig(&cfg.rig).map_err(sim_failure)?;
    let mut graph = CovisGraph::new(&rig, cfg.graph).map_err(graph_failure)?;
    let mut text = String::new();
    for t in 0..cfg.trajectory.n_steps {
        graph.update(t).map_err(graph_failure)?;
        let k = graph.counts();
        let line = format!(
            "step {t}: {} temporal, {} spatial, {} spatial_temporal, {} exhaustive",
            k.temporal,
            k.spatial,
            k.spatial_temporal,
            graph.exhaustive_edges().len()
        );
        println!("{line}");
        let _ = writeln!(text, "# {line}");
        text.push_str(&graph.dump());
    }
    write(&common.out.join("graph.txt"), &text)
}
