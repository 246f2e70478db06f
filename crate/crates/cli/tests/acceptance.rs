//! End-to-end acceptance checks. Each test prints one PASS/FAIL line.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use mcdba::covis::{CovisGraph, Edge, EdgeKind, FrameId, GraphParams};
use mcdba::dba::{assemble, jacobian_depth, jacobian_pose, linearize_edge, residuals, schur_solve, DbaConfig, DbaProblem, EdgeObservation, PoseSide};
use mcdba::flow::{flow_consistency_mask, induced_flow, photometric_error, rotation_compensate, ssim, ConfidenceField, FlowField, Image};
use mcdba::geometry::{relative_pose, se3_exp, Camera, Intrinsics, Pose, Rig, Twist, DEFAULT_EPSILON_Z};
use mcdba::metrics::{ate, depth_metrics, median_scale, AteOptions, DepthPair};
use mcdba::pipeline::{run_sequence, DepthInit, FlowEstimate, FlowProvider, Initializer, OracleProvider, PipelineConfig, PipelineError, PipelineState};
use mcdba::simulator::{make_rig, make_scene, perturb_state, DepthSpec, NoiseSpec, RigSpec, Scene, TrajectoryModel, TrajectorySpec};
use mcdba::InverseDepthField;
use nalgebra::{DMatrix, DVector, Matrix2x6, UnitQuaternion, Vector2, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Writes to the process stdout directly so the line survives the test
/// harness's output capture.
fn report(id: &str, name: &str, pass: bool, detail: &str) {
    let line = format!("{} criterion {id} ({name}): {detail}\n", if pass { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
}

fn random_rotation(rng: &mut ChaCha8Rng, max_angle: f64) -> UnitQuaternion<f64> {
    let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let angle = rng.random_range(0.0..max_angle);
    UnitQuaternion::from_scaled_axis(axis.normalize() * angle)
}

fn random_vec(rng: &mut ChaCha8Rng, r: f64) -> Vector3<f64> {
    Vector3::new(rng.random_range(-r..r), rng.random_range(-r..r), rng.random_range(-r..r))
}

fn random_intrinsics(rng: &mut ChaCha8Rng, width: u32, height: u32) -> Intrinsics {
    let fx = rng.random_range(40.0..200.0);
    let fy = fx * rng.random_range(0.9..1.1);
    let cx = 0.5 * (width as f64 - 1.0) + rng.random_range(-0.5..0.5);
    let cy = 0.5 * (height as f64 - 1.0) + rng.random_range(-0.5..0.5);
    Intrinsics::new(fx, fy, cx, cy, width, height).unwrap()
}

fn random_rig(rng: &mut ChaCha8Rng, n: usize, width: u32, height: u32) -> Rig {
    let cameras = (0..n)
        .map(|_| Camera { intrinsics: random_intrinsics(rng, width, height), extrinsic: Pose::new(random_rotation(rng, 0.3), random_vec(rng, 0.3)) })
        .collect();
    Rig::new(cameras, 0).unwrap()
}

fn random_depth(rng: &mut ChaCha8Rng, width: usize, height: usize) -> InverseDepthField {
    InverseDepthField::new(width, height, (0..width * height).map(|_| rng.random_range(0.2..1.5)).collect())
}

/// Projection of every pixel under the current state plus Gaussian noise.
fn noisy_observation(p: &DbaProblem, e: &Edge, rng: &mut ChaCha8Rng, sigma: f64) -> EdgeObservation {
    let d = &p.depths[&e.from];
    let g = p.relative_pose(e);
    let (ci, cj) = (p.rig.camera(e.from.c), p.rig.camera(e.to.c));
    let flow = induced_flow(d, &g, &ci.intrinsics, &cj.intrinsics, p.epsilon_z);
    let targets = flow.targets().into_iter().map(|t| [t[0] + sigma * rng.random_range(-1.0..1.0), t[1] + sigma * rng.random_range(-1.0..1.0)]).collect();
    let conf = (0..d.len()).map(|_| [rng.random_range(0.05..1.0), rng.random_range(0.05..1.0)]).collect();
    EdgeObservation { targets, confidence: ConfidenceField::new(d.width, d.height, conf).unwrap() }
}

fn with_pose(p: &DbaProblem, t: usize, xi: Vector6<f64>) -> DbaProblem {
    let mut q = p.clone();
    let pose = q.poses[&t];
    q.poses.insert(t, se3_exp(&Twist::from_vector(&xi)) * pose);
    q
}

#[test]
fn c1_jacobians_match_finite_differences() {
    let start = Instant::now();
    let (w, h) = (6usize, 5usize);
    let step = 1e-6;
    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    for seed in 0..1000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rig = random_rig(&mut rng, 2, w as u32, h as u32);
        let mut p = DbaProblem::new(rig);
        for t in 0..2 {
            p.poses.insert(t, Pose::new(random_rotation(&mut rng, 0.3), random_vec(&mut rng, 0.5)));
        }
        let (ti, tj) = if rng.random_bool(0.5) { (0, 1) } else { (1, 0) };
        let e = Edge::new(FrameId::new(ti, rng.random_range(0..2)), FrameId::new(tj, rng.random_range(0..2)));
        p.depths.insert(e.from, random_depth(&mut rng, w, h));
        p.edges.push(e);
        p.anchor.insert(2);
        let obs = noisy_observation(&p, &e, &mut rng, 1.0);
        p.observations.insert(e, obs);

        let lin = linearize_edge(&p, &e).unwrap();
        let jd = jacobian_depth(&p, &e).unwrap();
        let jo = jacobian_pose(&p, &e, PoseSide::Outgoing).unwrap();
        let ji = jacobian_pose(&p, &e, PoseSide::Incoming).unwrap();

        // Z' of every pixel, to drop near-singular projections
        let g = p.relative_pose(&e);
        let d = &p.depths[&e.from];
        let intr = p.rig.camera(e.from.c).intrinsics;
        let z: Vec<f64> = (0..d.len())
            .map(|idx| {
                let x = mcdba::geometry::unproject(&intr, (idx % w) as f64, (idx / w) as f64, d.values[idx]);
                g.transform_homo(&x).z
            })
            .collect();

        let central = |plus: &DbaProblem, minus: &DbaProblem| -> Vec<Option<Vector2<f64>>> {
            let (a, b) = (residuals(plus, &e).unwrap(), residuals(minus, &e).unwrap());
            (0..a.values.len())
                .map(|k| (a.valid[k] && b.valid[k]).then(|| Vector2::new(a.values[k][0] - b.values[k][0], a.values[k][1] - b.values[k][1]) / (2.0 * step)))
                .collect()
        };
        let shifted = |delta: f64| {
            let mut q = p.clone();
            q.depths.get_mut(&e.from).unwrap().values.iter_mut().for_each(|v| *v += delta);
            q
        };
        let fd_depth = central(&shifted(step), &shifted(-step));
        let mut fd_out = vec![Matrix2x6::zeros(); d.len()];
        let mut fd_in = vec![Matrix2x6::zeros(); d.len()];
        let mut fd_ok = vec![true; d.len()];
        for k in 0..6 {
            let mut xi = Vector6::zeros();
            xi[k] = step;
            for (t, fd) in [(ti, &mut fd_out), (tj, &mut fd_in)] {
                let col = central(&with_pose(&p, t, xi), &with_pose(&p, t, -xi));
                for (idx, c) in col.iter().enumerate() {
                    match c {
                        Some(v) => fd[idx].set_column(k, v),
                        None => fd_ok[idx] = false,
                    }
                }
            }
        }
        let rel = |a: &[f64], n: &[f64]| {
            let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let scale = n.iter().map(|x| x * x).sum::<f64>().sqrt().max(a.iter().map(|x| x * x).sum::<f64>().sqrt());
            if scale == 0.0 {
                0.0
            } else {
                diff / scale
            }
        };
        for idx in 0..d.len() {
            if !lin.valid[idx] || z[idx] < 1e-3 * d.values[idx] || !fd_ok[idx] {
                continue;
            }
            let Some(nd) = fd_depth[idx] else { continue };
            worst = worst.max(rel(jd[idx].as_slice(), nd.as_slice()));
            worst = worst.max(rel(jo[idx].as_slice(), fd_out[idx].as_slice()));
            worst = worst.max(rel(ji[idx].as_slice(), fd_in[idx].as_slice()));
            checked += 1;
        }
    }
    let elapsed = start.elapsed();
    let pass = worst < 1e-5 && checked > 10_000 && elapsed < Duration::from_secs(30);
    report("1", "Jacobian correctness", pass, &format!("worst relative error {worst:.3e} over {checked} pixels in {elapsed:.2?}"));
    assert!(pass);
}

/// Random problem with up to 5 free timesteps, 3 cameras and 8x8 frames.
fn random_problem(seed: u64) -> DbaProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_cams = rng.random_range(1..=3);
    let n_t = rng.random_range(2..=6);
    let (w, h) = (rng.random_range(3..=8), rng.random_range(3..=8));
    let mut p = DbaProblem::new(random_rig(&mut rng, n_cams, w as u32, h as u32));
    for t in 0..n_t {
        p.poses.insert(t, Pose::new(random_rotation(&mut rng, 0.1), Vector3::new(0.0, 0.0, 0.2 * t as f64) + random_vec(&mut rng, 0.05)));
        for c in 0..n_cams {
            p.depths.insert(FrameId::new(t, c), random_depth(&mut rng, w, h));
        }
    }
    p.anchor.insert(0);
    let frames: Vec<FrameId> = p.depths.keys().copied().collect();
    let mut edges = BTreeSet::new();
    // chain so every timestep is constrained, plus random extras
    for t in 1..n_t {
        let c = rng.random_range(0..n_cams);
        edges.insert(Edge::new(FrameId::new(t, c), FrameId::new(t - 1, c)));
        edges.insert(Edge::new(FrameId::new(t - 1, c), FrameId::new(t, c)));
    }
    for _ in 0..rng.random_range(0..3 * n_t) {
        let (a, b) = (frames[rng.random_range(0..frames.len())], frames[rng.random_range(0..frames.len())]);
        if a != b {
            edges.insert(Edge::new(a, b));
        }
    }
    p.edges = edges.into_iter().collect();
    for e in p.edges.clone() {
        let obs = noisy_observation(&p, &e, &mut rng, 2.0);
        p.observations.insert(e, obs);
    }
    p
}

/// Dense damped Gauss-Newton step built straight from the per-pixel
/// Jacobians and solved with LU, with the 2-norm condition number of the
/// reduced pose system, which bounds how far any two f64 solves can drift.
fn dense_step(p: &DbaProblem, damping: f64) -> (DVector<f64>, usize, f64) {
    let free = p.free_timesteps();
    let pose_col: BTreeMap<usize, usize> = free.iter().enumerate().map(|(i, t)| (*t, 6 * i)).collect();
    let mut depth_col = BTreeMap::new();
    let mut n = 6 * free.len();
    for (f, d) in &p.depths {
        depth_col.insert(*f, n);
        n += d.len();
    }
    let mut hess = DMatrix::zeros(n, n);
    let mut rhs = DVector::zeros(n);
    for e in &p.edges {
        let lin = linearize_edge(p, e).unwrap();
        let conf = &p.observations[e].confidence.values;
        for idx in 0..lin.valid.len() {
            if !lin.valid[idx] {
                continue;
            }
            for row in 0..2 {
                let mut j = DVector::zeros(n);
                for k in 0..6 {
                    if let Some(&c) = pose_col.get(&e.from.t) {
                        j[c + k] += lin.j_pose_out[idx][(row, k)];
                    }
                    if let Some(&c) = pose_col.get(&e.to.t) {
                        j[c + k] -= lin.j_pose_out[idx][(row, k)];
                    }
                }
                j[depth_col[&e.from] + idx] = lin.j_depth[idx][row];
                let wt = conf[idx][row];
                hess += &j * j.transpose() * wt;
                rhs -= &j * (wt * lin.residuals[idx][row]);
            }
        }
    }
    for k in 6 * free.len()..n {
        hess[(k, k)] += damping;
    }
    let pd = 6 * free.len();
    let mut reduced = hess.view((0, 0), (pd, pd)).into_owned();
    for k in pd..n {
        let col = hess.view((0, k), (pd, 1));
        reduced -= col * col.transpose() / hess[(k, k)];
    }
    let eig = reduced.symmetric_eigenvalues();
    let cond = if pd == 0 { 1.0 } else { eig.amax() / eig.iter().fold(f64::INFINITY, |m, v| m.min(v.abs())) };
    (hess.lu().solve(&rhs).expect("damped system is invertible"), 6 * free.len(), cond)
}

#[test]
fn c2_schur_matches_dense_solve() {
    let start = Instant::now();
    let cfg = DbaConfig::default();
    let mut worst: f64 = 0.0;
    let (mut accepted, mut skipped, mut seed) = (0, 0, 1000u64);
    while accepted < 50 {
        let p = random_problem(seed);
        seed += 1;
        let (dense, pose_dim, cond) = dense_step(&p, cfg.damping);
        // monocular draws can leave the scale gauge held only by the depth
        // damping; there any two f64 solvers differ by about cond * eps
        if cond > 1e7 {
            skipped += 1;
            continue;
        }
        accepted += 1;
        let update = schur_solve(&assemble(&p, &cfg).unwrap(), &cfg).unwrap();
        for (a, xi) in update.pose.iter().enumerate() {
            let v = xi.to_vector();
            for k in 0..6 {
                worst = worst.max((v[k] - dense[6 * a + k]).abs());
            }
        }
        let mut offset = pose_dim;
        for dd in &update.depth {
            for (k, x) in dd.iter().enumerate() {
                worst = worst.max((x - dense[offset + k]).abs());
            }
            offset += dd.len();
        }
    }
    let elapsed = start.elapsed();
    let pass = worst < 1e-8 && elapsed < Duration::from_secs(60);
    report("2", "Schur-dense equivalence", pass, &format!("max abs difference {worst:.3e} over 50 problems ({skipped} draws with reduced-system condition number above 1e7 skipped) in {elapsed:.2?}"));
    assert!(pass);
}

/// Six-camera ring driving straight ahead, 12 steps, 16x12 frames.
fn ring_scene(seed: u64) -> Scene {
    let traj = TrajectorySpec { model: TrajectoryModel::ForwardConstant, speed: 0.2, yaw_rate: 0.0, n_steps: 12 };
    make_scene(&RigSpec::default(), &traj, &DepthSpec::default(), seed).unwrap()
}

fn pipeline_config() -> PipelineConfig {
    PipelineConfig { warmup_flow_threshold: 0.3, keyframe_flow_threshold: 0.3, ..PipelineConfig::default() }
}

fn base_noise(seed: u64) -> NoiseSpec {
    NoiseSpec { pose_sigma: 0.05, depth_rel_sigma: 0.2, seed, ..NoiseSpec::default() }
}

struct RunSummary {
    ate: f64,
    ate_scaled: f64,
    depth_rel: f64,
    /// Ground truth over estimate, from per-camera median depths.
    depth_scale: f64,
    monotone: bool,
}

fn run_scene(scene: &Scene, noise: &NoiseSpec, params: GraphParams, provider: &dyn FlowProvider) -> RunSummary {
    let mut poses = scene.trajectory.iter().copied().enumerate().collect();
    let mut depths = scene.depths.clone();
    perturb_state(&mut poses, &mut depths, &BTreeSet::from([0]), noise);
    let init = Initializer { poses, depths: DepthInit::Fields(depths) };
    let n = scene.trajectory.len();
    let (state, _) = run_sequence(&scene.rig, params, provider, &init, 0..n, &DbaConfig::default(), &pipeline_config()).unwrap();
    let pred: Vec<Pose> = state.keyframes.iter().map(|t| state.poses[t]).collect();
    let gt: Vec<Pose> = state.keyframes.iter().map(|t| scene.trajectory[*t]).collect();
    let traj = ate(&pred, &gt, &AteOptions::default()).unwrap();
    let mut rel = 0.0;
    let mut count = 0usize;
    let mut metric = Vec::new();
    for t in &state.keyframes {
        for c in 0..scene.rig.len() {
            let f = FrameId::new(*t, c);
            let (p, g) = (state.depths[&f].to_depth(), scene.depths[&f].to_depth());
            for (a, b) in p.iter().zip(&g) {
                rel += (a - b).abs() / b;
                count += 1;
            }
            metric.push((c, p, g));
        }
    }
    let pairs: Vec<DepthPair<'_>> = metric.iter().map(|(c, p, g)| DepthPair { camera: *c, pred: p, gt: g, valid: None }).collect();
    let monotone = state.log.iter().all(|r| r.energy_after <= r.energy_before * (1.0 + 1e-9) + 1e-12);
    RunSummary {
        ate: traj.ate,
        ate_scaled: traj.ate_scaled,
        depth_rel: rel / count as f64,
        depth_scale: median_scale(&pairs, f64::INFINITY).unwrap(),
        monotone,
    }
}

fn convergence_sweep(id: &str, name: &str, outliers: f64) -> bool {
    let start = Instant::now();
    let runs: Vec<RunSummary> = (0..100u64)
        .into_par_iter()
        .map(|seed| {
            let scene = ring_scene(seed);
            let noise = NoiseSpec { outlier_fraction: outliers, ..base_noise(seed) };
            let provider = OracleProvider { scene: scene.clone(), noise: noise.clone() };
            run_scene(&scene, &noise, GraphParams::default(), &provider)
        })
        .collect();
    let elapsed = start.elapsed();
    let worst_ate = runs.iter().map(|r| r.ate).fold(0.0, f64::max);
    let worst_depth = runs.iter().map(|r| r.depth_rel).fold(0.0, f64::max);
    let monotone = runs.iter().filter(|r| r.monotone).count();
    let pass = worst_ate < 1e-3 && worst_depth < 1e-3 && monotone >= 95 && elapsed < Duration::from_secs(300);
    report(
        id,
        name,
        pass,
        &format!("worst ATE {worst_ate:.3e}, worst mean relative depth error {worst_depth:.3e}, monotone in {monotone}/100 seeds, {elapsed:.2?}"),
    );
    pass
}

#[test]
fn c3_convergence_from_perturbed_init() {
    assert!(convergence_sweep("3", "convergence", 0.0));
}

/// Oracle with every non-temporal edge silenced.
struct TemporalOnly(OracleProvider);

impl FlowProvider for TemporalOnly {
    fn estimate(&self, state: &PipelineState, edge: &Edge) -> Result<FlowEstimate, PipelineError> {
        let mut est = self.0.estimate(state, edge)?;
        if edge.kind() != EdgeKind::Temporal {
            est.confidence.values.iter_mut().for_each(|w| *w = [0.0; 2]);
        }
        Ok(est)
    }
}

#[test]
fn c4_spatial_edges_recover_scale() {
    let k = 1.3;
    // one window spanning the sequence, so the temporal-only run has a
    // single global scale gauge instead of a drifting one
    let params = GraphParams { dt_intra: 12, ..GraphParams::default() };
    let mut ok = true;
    let mut lines = Vec::new();
    for seed in 0..10u64 {
        let scene = ring_scene(seed);
        let noise = NoiseSpec { scale_perturbation: k, ..base_noise(seed) };
        let oracle = || OracleProvider { scene: scene.clone(), noise: noise.clone() };
        let temporal = run_scene(&scene, &noise, params, &TemporalOnly(oracle()));
        let full = run_scene(&scene, &noise, params, &oracle());
        let (ratio_t, ratio_f) = (1.0 / temporal.depth_scale, 1.0 / full.depth_scale);
        let gap_t = temporal.ate - temporal.ate_scaled;
        let gap_f = full.ate - full.ate_scaled;
        ok &= temporal.ate_scaled < 1e-3 && (ratio_t - 1.0).abs() >= 0.5 * (k - 1.0) && (ratio_f - 1.0).abs() < 1e-2 && gap_f < gap_t;
        lines.push(format!("seed {seed}: temporal-only scaled ATE {:.2e} depth ratio {ratio_t:.4}; with spatial depth ratio {ratio_f:.6} ATE gap {gap_t:.2e} -> {gap_f:.2e}", temporal.ate_scaled));
    }
    for l in &lines {
        std::io::stdout().lock().write_all(format!("  {l}\n").as_bytes()).unwrap();
    }
    report("4", "scale recovery", ok, &format!("injected scale {k} over 10 seeds"));
    assert!(ok);
}

#[test]
fn c5a_one_disabled_camera() {
    // two overlapping cameras 40 degrees apart on a turning rig
    let rig = RigSpec { n_cameras: 2, yaw_step_deg: Some(40.0), ..RigSpec::default() };
    let traj = TrajectorySpec { model: TrajectoryModel::ForwardYaw, speed: 0.2, yaw_rate: 0.02, n_steps: 12 };
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let scene = make_scene(&rig, &traj, &DepthSpec::default(), seed).unwrap();
        let noise = NoiseSpec { disabled_cameras: vec![1], ..base_noise(seed) };
        let provider = OracleProvider { scene: scene.clone(), noise: noise.clone() };
        worst = worst.max(run_scene(&scene, &noise, GraphParams::default(), &provider).ate);
    }
    let pass = worst < 1e-3;
    report("5a", "robustness, one camera zeroed", pass, &format!("worst pose ATE {worst:.3e} over 20 seeds"));
    assert!(pass);
}

#[test]
fn c5b_low_confidence_outliers() {
    assert!(convergence_sweep("5b", "robustness, 10% outliers", 0.1));
}

/// Edges the rules call for once the timesteps `0..=s` have been inserted,
/// for a six-camera ring.
fn rule_edges(s: usize, p: &GraphParams) -> BTreeSet<Edge> {
    let n = 6usize;
    let yaw = |c: usize| c.min(n - c);
    let neighbours: Vec<(usize, usize)> = (0..n).flat_map(|c| [(c, (c + 1) % n), (c, (c + n - 1) % n)]).collect();
    let mut out = BTreeSet::new();
    for a in 0..=s {
        for b in 0..=s {
            let gap = a.abs_diff(b);
            let oldest = a.min(b);
            if gap > 0 && gap < p.r_intra && oldest + p.dt_intra >= s {
                for c in 0..n {
                    out.insert(Edge::new(FrameId::new(a, c), FrameId::new(b, c)));
                }
            }
            if oldest + p.dt_inter < s {
                continue;
            }
            for &(ci, cj) in &neighbours {
                if gap == 0 {
                    out.insert(Edge::new(FrameId::new(a, ci), FrameId::new(a, cj)));
                } else if a > b && gap <= p.r_inter && yaw(cj) <= yaw(ci) {
                    out.insert(Edge::new(FrameId::new(a, ci), FrameId::new(b, cj)));
                    out.insert(Edge::new(FrameId::new(b, cj), FrameId::new(a, ci)));
                }
            }
        }
    }
    out
}

#[test]
fn c6_graph_matches_rules_and_is_sparse() {
    let params = GraphParams { dt_intra: 3, r_intra: 2, dt_inter: 2, r_inter: 2 };
    let rig = make_rig(&RigSpec::default()).unwrap();
    let mut graph = CovisGraph::new(&rig, params).unwrap();
    let mut mismatches = Vec::new();
    let mut min_ratio = f64::INFINITY;
    let mut last = (0, 0);
    for s in 0..20 {
        graph.update(s).unwrap();
        if graph.edges() != &rule_edges(s, &params) {
            mismatches.push(s);
        }
        let (edges, dense) = (graph.edges().len(), graph.exhaustive_edges().len());
        if s >= params.max_window() {
            min_ratio = min_ratio.min(dense as f64 / edges as f64);
        }
        last = (edges, dense);
    }
    let pass = mismatches.is_empty() && min_ratio >= 5.0;
    report(
        "6",
        "graph correctness and economy",
        pass,
        &format!("rule mismatches at steps {mismatches:?}; steady state {} edges vs {} exhaustive, min reduction {min_ratio:.2}x", last.0, last.1),
    );
    assert!(pass);
}

/// Inverse depth of the world plane `n . X = c` seen by a camera at `pose`.
fn plane_depth(pose: &Pose, intr: &Intrinsics, n: Vector3<f64>, c: f64) -> InverseDepthField {
    let (w, h) = (intr.width as usize, intr.height as usize);
    let nc = pose.rotation.inverse() * n;
    let cc = c - n.dot(&pose.translation);
    let values = (0..w * h)
        .map(|idx| {
            let ray = Vector3::new(((idx % w) as f64 - intr.cx) / intr.fx, ((idx / w) as f64 - intr.cy) / intr.fy, 1.0);
            nc.dot(&ray) / cc
        })
        .collect();
    InverseDepthField::new(w, h, values)
}

/// Reference SSIM: explicit mirror padding and two-pass local moments.
fn ssim_oracle(a: &Image, b: &Image) -> Vec<f64> {
    let (w, h, ch) = (a.width as isize, a.height as isize, a.channels);
    let mirror = |i: isize, n: isize| if i < 0 { -i } else if i >= n { 2 * n - 2 - i } else { i };
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for k in 0..ch {
                let mut pa = Vec::new();
                let mut pb = Vec::new();
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (xx, yy) = (mirror(x + dx, w) as usize, mirror(y + dy, h) as usize);
                        pa.push(a.at(xx, yy, k));
                        pb.push(b.at(xx, yy, k));
                    }
                }
                let ma = pa.iter().sum::<f64>() / 9.0;
                let mb = pb.iter().sum::<f64>() / 9.0;
                let va = pa.iter().map(|v| (v - ma).powi(2)).sum::<f64>() / 9.0;
                let vb = pb.iter().map(|v| (v - mb).powi(2)).sum::<f64>() / 9.0;
                let cov = pa.iter().zip(&pb).map(|(u, v)| (u - ma) * (v - mb)).sum::<f64>() / 9.0;
                let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
                acc += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            }
            out.push(acc / ch as f64);
        }
    }
    out
}

#[test]
fn c7_flow_and_mask_operators() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);

    // pure rotation: cameras share a centre
    let mut worst_rot: f64 = 0.0;
    let mut rot_valid = 0usize;
    for _ in 0..50 {
        let intr_i = random_intrinsics(&mut rng, 24, 18);
        let intr_j = random_intrinsics(&mut rng, 24, 18);
        let centre = random_vec(&mut rng, 0.5);
        let (ri, rj) = (random_rotation(&mut rng, 0.3), random_rotation(&mut rng, 0.3));
        let ego = Pose::new(random_rotation(&mut rng, 0.5), random_vec(&mut rng, 2.0));
        let g = relative_pose(&ego, &ego, &Pose::new(ri, centre), &Pose::new(rj, centre));
        let d = random_depth(&mut rng, 24, 18);
        let comp = rotation_compensate(&induced_flow(&d, &g, &intr_i, &intr_j, DEFAULT_EPSILON_Z), &ri, &rj, &intr_i, &intr_j, DEFAULT_EPSILON_Z);
        for (v, ok) in comp.values.iter().zip(&comp.valid) {
            if *ok {
                rot_valid += 1;
                worst_rot = worst_rot.max(v[0].abs().max(v[1].abs()));
            }
        }
    }

    // static plane seen from two poses, forward and backward flow
    let intr = Intrinsics::new(30.0, 30.0, 15.5, 11.5, 32, 24).unwrap();
    let (n, c) = (Vector3::new(0.1, -0.05, 1.0).normalize(), 5.0);
    let pi = Pose::identity();
    let pj = Pose::new(UnitQuaternion::from_euler_angles(0.02, -0.03, 0.01), Vector3::new(0.15, 0.05, 0.3));
    let (di, dj) = (plane_depth(&pi, &intr, n, c), plane_depth(&pj, &intr, n, c));
    let fwd = induced_flow(&di, &(pj.inverse() * pi), &intr, &intr, DEFAULT_EPSILON_Z);
    let bwd = induced_flow(&dj, &(pi.inverse() * pj), &intr, &intr, DEFAULT_EPSILON_Z);
    let inside = |f: &FlowField, idx: usize| {
        let t = [(idx % 32) as f64 + f.values[idx][0], (idx / 32) as f64 + f.values[idx][1]];
        f.valid[idx] && t[0] >= 0.0 && t[1] >= 0.0 && t[0] <= 31.0 && t[1] <= 23.0
    };
    let mask = flow_consistency_mask(&fwd, &bwd, 3.0).unwrap();
    let static_px: Vec<usize> = (0..fwd.len()).filter(|&i| inside(&fwd, i)).collect();
    let pass_rate = static_px.iter().filter(|&&i| mask.values[i]).count() as f64 / static_px.len() as f64;

    let mut moved = fwd.clone();
    let dynamic: Vec<usize> = static_px.iter().copied().filter(|_| rng.random_bool(0.2)).collect();
    for &i in &dynamic {
        let a: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        moved.values[i] = [moved.values[i][0] + 10.0 * a.cos(), moved.values[i][1] + 10.0 * a.sin()];
    }
    let moved_mask = flow_consistency_mask(&moved, &bwd, 3.0).unwrap();
    let rejected = dynamic.iter().filter(|&&i| !moved_mask.values[i]).count();

    // photometric identities
    let img = Image::new(20, 15, 3, (0..20 * 15 * 3).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
    let other = Image::new(20, 15, 3, (0..20 * 15 * 3).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
    let self_pe = photometric_error(&img, &img).unwrap().into_iter().fold(0.0, |m: f64, v| m.max(v.abs()));
    let ssim_err = ssim(&img, &other).unwrap().iter().zip(ssim_oracle(&img, &other)).fold(0.0, |m: f64, (a, b)| m.max((a - b).abs()));

    let pass = rot_valid > 0
        && worst_rot < 1e-9
        && pass_rate >= 0.99
        && !dynamic.is_empty()
        && rejected == dynamic.len()
        && self_pe == 0.0
        && ssim_err < 1e-10;
    report(
        "7",
        "flow and mask operators",
        pass,
        &format!(
            "rotation residual {worst_rot:.2e} px over {rot_valid} px; static pass rate {:.4}; rejected {rejected}/{} dynamic; pe(a, a) = {self_pe}; SSIM oracle error {ssim_err:.2e}",
            pass_rate,
            dynamic.len()
        ),
    );
    assert!(pass);
}

#[test]
fn c8_metrics_match_scalar_formulas() {
    // two cameras with two frames each, power-of-two ground truth so every
    // term and every average is exact
    let gt = [[1.0, 2.0, 4.0, 8.0, 2.0], [4.0, 4.0, 1.0, 2.0, 8.0], [2.0, 2.0, 2.0, 4.0, 1.0], [8.0, 1.0, 2.0, 4.0, 4.0]];
    let pred = [[1.5, 2.0, 3.0, 12.0, 2.5], [4.0, 5.0, 1.25, 1.0, 8.0], [2.0, 3.0, 1.5, 4.0, 1.0], [6.0, 1.5, 2.0, 5.0, 4.0]];
    let cams = [0, 0, 1, 1];
    let frames: Vec<DepthPair<'_>> = (0..4).map(|i| DepthPair { camera: cams[i], pred: &pred[i], gt: &gt[i], valid: None }).collect();
    let eval = depth_metrics(&frames, 100.0).unwrap();

    let frame = |p: &[f64; 5], g: &[f64; 5]| {
        let n = 5.0;
        let abs_rel = p.iter().zip(g).map(|(p, g)| (p - g).abs() / g).sum::<f64>() / n;
        let sq_rel = p.iter().zip(g).map(|(p, g)| (p - g) * (p - g) / g).sum::<f64>() / n;
        let rmse = (p.iter().zip(g).map(|(p, g)| (p - g) * (p - g)).sum::<f64>() / n).sqrt();
        let delta: Vec<f64> = (1..=3).map(|k| p.iter().zip(g).filter(|(p, g)| (*p / *g).max(*g / *p) < 1.25f64.powi(k)).count() as f64 / n).collect();
        [abs_rel, sq_rel, rmse, delta[0], delta[1], delta[2]]
    };
    let per_frame: Vec<[f64; 6]> = (0..4).map(|i| frame(&pred[i], &gt[i])).collect();
    let cam_mean = |a: usize, b: usize| -> [f64; 6] { std::array::from_fn(|k| (per_frame[a][k] + per_frame[b][k]) / 2.0) };
    let (c0, c1) = (cam_mean(0, 1), cam_mean(2, 3));
    let expected: [f64; 6] = std::array::from_fn(|k| (c0[k] + c1[k]) / 2.0);
    let got = [eval.aggregate.abs_rel, eval.aggregate.sq_rel, eval.aggregate.rmse, eval.aggregate.delta[0], eval.aggregate.delta[1], eval.aggregate.delta[2]];
    let depth_ok = got == expected;

    let med = |mut v: Vec<f64>| {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        (v[4] + v[5]) / 2.0
    };
    let pooled = |idx: [usize; 2], src: &[[f64; 5]; 4]| -> Vec<f64> { idx.iter().flat_map(|&i| src[i]).collect() };
    let s0 = med(pooled([0, 1], &gt)) / med(pooled([0, 1], &pred));
    let s1 = med(pooled([2, 3], &gt)) / med(pooled([2, 3], &pred));
    let scale_ok = median_scale(&frames, 100.0).unwrap() == (s0 + s1) / 2.0;

    let tp = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]];
    let tq = [[2.0, 1.0, 0.0], [0.0, 3.0, 0.0], [0.0, 0.0, 1.0], [2.0, 0.0, 0.0]];
    let poses = |t: &[[f64; 3]; 4]| -> Vec<Pose> { t.iter().map(|v| Pose::from_translation(Vector3::new(v[0], v[1], v[2]))).collect() };
    let traj = ate(&poses(&tp), &poses(&tq), &AteOptions::default()).unwrap();
    let rmse = |s: f64| {
        let sum: f64 = tp.iter().zip(&tq).map(|(p, q)| (0..3).map(|k| (s * p[k] - q[k]).powi(2)).sum::<f64>()).sum();
        (sum / 4.0).sqrt()
    };
    let dot: f64 = tp.iter().zip(&tq).map(|(p, q)| p[0] * q[0] + p[1] * q[1] + p[2] * q[2]).sum();
    let norm: f64 = tp.iter().map(|p| p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sum();
    let s = dot / norm;
    let ate_ok = traj.ate == rmse(1.0) && traj.scale == s && traj.ate_scaled == rmse(s);

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut monotone = true;
    for _ in 0..200 {
        let n = rng.random_range(5..50);
        let g: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..50.0)).collect();
        let p: Vec<f64> = g.iter().map(|x| x * rng.random_range(0.3..3.0)).collect();
        let e = depth_metrics(&[DepthPair { camera: 0, pred: &p, gt: &g, valid: None }], 80.0).unwrap().aggregate;
        monotone &= e.delta[0] <= e.delta[1] && e.delta[1] <= e.delta[2];
    }

    let pass = depth_ok && scale_ok && ate_ok && monotone;
    report(
        "8",
        "metrics",
        pass,
        &format!("depth_metrics exact {depth_ok}, median_scale exact {scale_ok}, ate exact {ate_ok}, delta monotone {monotone}"),
    );
    assert!(pass);
}

fn run_cli(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_mcdba")).args(args).output().expect("binary runs");
    assert!(out.status.success(), "mcdba {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn collect_files(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            collect_files(root, &path, out);
        } else {
            out.insert(path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
        }
    }
}

#[test]
fn c9_cli_runs_are_byte_identical() {
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/ring6.toml");
    let config = config.to_str().unwrap();
    let mut trees = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let p = |name: &str| dir.path().join(name).to_str().unwrap().to_owned();
        run_cli(&["simulate", "--config", config, "--seed", "11", "--out", &p("bundle")]);
        run_cli(&["solve", &p("bundle"), "--config", config, "--seed", "11", "--out", &p("solution")]);
        run_cli(&["eval", &p("bundle"), &p("solution"), "--config", config, "--out", &p("eval")]);
        let mut files = BTreeMap::new();
        collect_files(dir.path(), dir.path(), &mut files);
        trees.push(files);
    }
    let differing: Vec<&PathBuf> = trees[0].iter().filter(|(k, v)| trees[1].get(*k) != Some(v)).map(|(k, _)| k).collect();
    let pass = trees[0].len() == trees[1].len() && trees[0].len() > 10 && differing.is_empty();
    report("9", "determinism", pass, &format!("{} files compared, {} differ", trees[0].len(), differing.len()));
    assert!(pass);
}
