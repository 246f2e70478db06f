//! Multi-camera dense bundle adjustment.
//!
//! Every edge `i -> j` contributes a per-pixel reprojection residual
//! `r = p_ij - proj_j(G_ij * unproj_i(d_i))` weighted by the edge's
//! two-channel confidence. `G_ij` is decomposed into the ego-poses of the two
//! timesteps and the fixed camera extrinsics, so the unknowns are one SE(3)
//! pose per free timestep and one inverse depth per pixel of every node.
//!
//! The linearized system
//!
//! ```text
//! [ B    E         ] [dxi]   [v]
//! [ E^T  C + lambda] [dd ] = [w]
//! ```
//!
//! has a diagonal depth block, which is eliminated with the Schur complement
//! `S = B - E (C + lambda)^-1 E^T`. Pose blocks are laid out timestep-major
//! (ascending free timesteps) and depth blocks node-major (ascending
//! `(t, c)`), and every accumulation runs in that order, so results do not
//! depend on how per-edge work is scheduled.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix2x6, Matrix6, Vector2, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::covis::{Edge, FrameId};
use crate::flow::ConfidenceField;
use crate::geometry::{generator_action, project, project_jacobian, se3_adjoint, se3_exp, unproject, Pose, Rig, Twist, DEFAULT_EPSILON_Z};
use crate::parallel;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DbaError {
    #[error("edge {0:?} is not part of the problem")]
    UnknownEdge(Edge),
    #[error("normal equations are not positive definite (pivot {pivot:e} at row {row})")]
    NotPositiveDefinite { pivot: f64, row: usize },
    #[error("both poses and depths are fixed, nothing to solve")]
    NoFreeVariables,
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

/// Per-pixel inverse depth of one frame, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct InverseDepthField {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl InverseDepthField {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), width * height, "inverse depth buffer size mismatch");
        Self { width, height, values }
    }

    pub fn constant(width: usize, height: usize, value: f64) -> Self {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.values[v * self.width + u]
    }

    /// Metric depth, `inf` where the inverse depth is zero.
    pub fn to_depth(&self) -> Vec<f64> {
        self.values.iter().map(|&d| 1.0 / d).collect()
    }
}

/// Flow targets and confidences of one edge.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeObservation {
    /// Target pixel `x_i + f_ij` for every source pixel.
    pub targets: Vec<[f64; 2]>,
    pub confidence: ConfidenceField,
}

#[derive(Clone, Debug)]
pub struct DbaProblem {
    pub rig: Rig,
    pub edges: Vec<Edge>,
    /// Ego-pose (rig-to-world) per timestep.
    pub poses: BTreeMap<usize, Pose>,
    pub depths: BTreeMap<FrameId, InverseDepthField>,
    pub observations: BTreeMap<Edge, EdgeObservation>,
    /// Timesteps whose pose is held fixed.
    pub anchor: BTreeSet<usize>,
    pub epsilon_z: f64,
    /// Pixels whose metric depth in either frame is at or below this are
    /// dropped from the energy.
    pub min_depth: f64,
}

impl DbaProblem {
    pub fn new(rig: Rig) -> Self {
        Self {
            rig,
            edges: Vec::new(),
            poses: BTreeMap::new(),
            depths: BTreeMap::new(),
            observations: BTreeMap::new(),
            anchor: BTreeSet::new(),
            epsilon_z: DEFAULT_EPSILON_Z,
            min_depth: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), DbaError> {
        let bad = |m: String| Err(DbaError::InvalidProblem(m));
        if self.anchor.is_empty() {
            return bad("at least one anchored timestep is required".into());
        }
        for e in &self.edges {
            for f in [e.from, e.to] {
                if f.c >= self.rig.len() {
                    return bad(format!("frame {f} references a missing camera"));
                }
                if !self.poses.contains_key(&f.t) {
                    return bad(format!("no pose for timestep {}", f.t));
                }
            }
            let Some(d) = self.depths.get(&e.from) else {
                return bad(format!("no depth for frame {}", e.from));
            };
            let intr = &self.rig.camera(e.from.c).intrinsics;
            if d.width != intr.width as usize || d.height != intr.height as usize {
                return bad(format!("depth of {} does not match its camera size", e.from));
            }
            let Some(obs) = self.observations.get(e) else {
                return bad(format!("no observation for edge {e:?}"));
            };
            if obs.targets.len() != d.len() || obs.confidence.values.len() != d.len() {
                return bad(format!("observation size mismatch on edge {e:?}"));
            }
        }
        Ok(())
    }

    /// Timesteps with a free pose, ascending.
    pub fn free_timesteps(&self) -> Vec<usize> {
        let used: BTreeSet<usize> = self.edges.iter().flat_map(|e| [e.from.t, e.to.t]).collect();
        used.into_iter().filter(|t| !self.anchor.contains(t)).collect()
    }

    fn check_edge(&self, edge: &Edge) -> Result<&EdgeObservation, DbaError> {
        self.observations.get(edge).filter(|_| self.edges.contains(edge)).ok_or(DbaError::UnknownEdge(*edge))
    }

    /// Relative transform of the edge under the current poses.
    pub fn relative_pose(&self, edge: &Edge) -> Pose {
        let ci = &self.rig.camera(edge.from.c).extrinsic;
        let cj = &self.rig.camera(edge.to.c).extrinsic;
        crate::geometry::relative_pose(&self.poses[&edge.from.t], &self.poses[&edge.to.t], ci, cj)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DbaConfig {
    /// Levenberg-Marquardt damping added to every depth diagonal entry.
    pub damping: f64,
    pub gn_steps_per_call: usize,
    pub fix_depths: bool,
    pub fix_poses: bool,
    pub d_floor: f64,
    /// Copied into [`DbaProblem::min_depth`] by the pipeline.
    pub min_depth: f64,
}

impl Default for DbaConfig {
    fn default() -> Self {
        Self { damping: 1e-4, gn_steps_per_call: 2, fix_depths: false, fix_poses: false, d_floor: 1e-4, min_depth: 0.2 }
    }
}

impl DbaConfig {
    pub fn validate(&self) -> Result<(), DbaError> {
        if self.fix_depths && self.fix_poses {
            return Err(DbaError::NoFreeVariables);
        }
        if !(self.damping >= 0.0) {
            return Err(DbaError::InvalidConfig("damping must be non-negative".into()));
        }
        if !(self.d_floor > 0.0) {
            return Err(DbaError::InvalidConfig("d_floor must be positive".into()));
        }
        if !(self.min_depth >= 0.0 && self.min_depth.is_finite()) {
            return Err(DbaError::InvalidConfig("min_depth must be finite and non-negative".into()));
        }
        if self.gn_steps_per_call == 0 {
            return Err(DbaError::InvalidConfig("gn_steps_per_call must be at least 1".into()));
        }
        Ok(())
    }
}

/// Residuals of one edge; invalid pixels carry zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualField {
    pub values: Vec<[f64; 2]>,
    pub valid: Vec<bool>,
}

/// Which ego-pose of an edge a Jacobian is taken against.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoseSide {
    /// The source frame's timestep `t_i`.
    Outgoing,
    /// The target frame's timestep `t_j`.
    Incoming,
}

/// Residuals and analytic Jacobians of every pixel of an edge.
#[derive(Clone, Debug)]
pub struct EdgeLinearization {
    pub valid: Vec<bool>,
    pub residuals: Vec<Vector2<f64>>,
    pub j_depth: Vec<Vector2<f64>>,
    /// Jacobian w.r.t. the outgoing ego-pose; the incoming one is its negation.
    pub j_pose_out: Vec<Matrix2x6<f64>>,
}

pub fn linearize_edge(p: &DbaProblem, edge: &Edge) -> Result<EdgeLinearization, DbaError> {
    let obs = p.check_edge(edge)?;
    let cam_i = p.rig.camera(edge.from.c);
    let cam_j = p.rig.camera(edge.to.c);
    let depth = &p.depths[&edge.from];
    let world_from_j = p.poses[&edge.to.t] * cam_j.extrinsic;
    let j_from_world = world_from_j.inverse();
    let g = j_from_world * (p.poses[&edge.from.t] * cam_i.extrinsic);
    let adj = se3_adjoint(&j_from_world);

    let n = depth.len();
    let mut out = EdgeLinearization {
        valid: vec![false; n],
        residuals: vec![Vector2::zeros(); n],
        j_depth: vec![Vector2::zeros(); n],
        j_pose_out: vec![Matrix2x6::zeros(); n],
    };
    for idx in 0..n {
        let (u, v) = ((idx % depth.width) as f64, (idx / depth.width) as f64);
        let d = depth.values[idx];
        let x = unproject(&cam_i.intrinsics, u, v, d);
        let xp = g.transform_homo(&x);
        if p.min_depth > 0.0 && !(1.0 > p.min_depth * d && xp.z > p.min_depth * d) {
            continue;
        }
        let (Ok(px), Ok(jp)) = (project(&cam_j.intrinsics, &xp, p.epsilon_z), project_jacobian(&cam_j.intrinsics, &xp, p.epsilon_z)) else {
            continue;
        };
        let jp3: Matrix2x3<f64> = jp.fixed_view::<2, 3>(0, 0).into_owned();
        let target = obs.targets[idx];
        out.valid[idx] = true;
        out.residuals[idx] = Vector2::new(target[0] - px[0], target[1] - px[1]);
        // dX'/dd = G e4, the translation column
        out.j_depth[idx] = -(jp3 * g.translation);
        // X' = exp(Adj_{M^-1} xi) X' for a left perturbation xi of P_ti
        out.j_pose_out[idx] = -(jp3 * generator_action(&xp) * adj);
    }
    Ok(out)
}

pub fn residuals(p: &DbaProblem, edge: &Edge) -> Result<ResidualField, DbaError> {
    let lin = linearize_edge(p, edge)?;
    Ok(ResidualField {
        values: lin.residuals.iter().map(|r| [r.x, r.y]).collect(),
        valid: lin.valid,
    })
}

pub fn jacobian_depth(p: &DbaProblem, edge: &Edge) -> Result<Vec<[f64; 2]>, DbaError> {
    Ok(linearize_edge(p, edge)?.j_depth.iter().map(|j| [j.x, j.y]).collect())
}

pub fn jacobian_pose(p: &DbaProblem, edge: &Edge, side: PoseSide) -> Result<Vec<Matrix2x6<f64>>, DbaError> {
    let lin = linearize_edge(p, edge)?;
    Ok(match side {
        PoseSide::Outgoing => lin.j_pose_out,
        PoseSide::Incoming => lin.j_pose_out.into_iter().map(|j| -j).collect(),
    })
}

fn weighted_sq(r: &Vector2<f64>, w: &[f64; 2]) -> f64 {
    w[0] * r.x * r.x + w[1] * r.y * r.y
}

/// Confidence-weighted energy of each edge, in problem edge order.
pub fn edge_energies(p: &DbaProblem) -> Result<Vec<(Edge, f64)>, DbaError> {
    let energies = parallel::map_collect(&p.edges, |e| -> Result<f64, DbaError> {
        let obs = p.check_edge(e)?;
        let res = residuals(p, e)?;
        Ok(res
            .values
            .iter()
            .zip(&res.valid)
            .zip(&obs.confidence.values)
            .filter(|((_, v), _)| **v)
            .map(|((r, _), w)| weighted_sq(&Vector2::new(r[0], r[1]), w))
            .sum())
    });
    p.edges.iter().zip(energies).map(|(e, en)| en.map(|en| (*e, en))).collect()
}

pub fn energy(p: &DbaProblem) -> Result<f64, DbaError> {
    Ok(edge_energies(p)?.into_iter().map(|(_, e)| e).sum())
}

/// Block-structured Gauss-Newton system.
#[derive(Clone, Debug)]
pub struct NormalEquations {
    pub free_timesteps: Vec<usize>,
    pub nodes: Vec<FrameId>,
    /// `6T' x 6T'` pose block.
    pub b: DMatrix<f64>,
    pub v: DVector<f64>,
    /// Pose-depth coupling keyed by `(pose index, node index)`, one 6-vector per pixel.
    pub e: BTreeMap<(usize, usize), Vec<Vector6<f64>>>,
    /// Depth diagonal per node.
    pub c: Vec<Vec<f64>>,
    pub w: Vec<Vec<f64>>,
    pub solve_poses: bool,
    pub solve_depths: bool,
}

impl NormalEquations {
    pub fn pose_dim(&self) -> usize {
        6 * self.free_timesteps.len()
    }
}

struct EdgeBlocks {
    node: usize,
    /// Pose index and per-pixel Jacobian for each free, distinct side.
    b: Vec<(usize, usize, Matrix6<f64>)>,
    v: Vec<(usize, Vector6<f64>)>,
    e: Vec<(usize, Vec<Vector6<f64>>)>,
    c: Vec<f64>,
    w: Vec<f64>,
}

fn edge_blocks(
    p: &DbaProblem,
    edge: &Edge,
    pose_index: &BTreeMap<usize, usize>,
    node: usize,
    with_poses: bool,
    with_depths: bool,
) -> Result<EdgeBlocks, DbaError> {
    let lin = linearize_edge(p, edge)?;
    let conf = &p.observations[edge].confidence.values;
    let n = lin.valid.len();

    // sides that move: (pose index, sign). Equal timesteps merge into one
    // side whose Jacobians cancel exactly.
    let mut sides: Vec<(usize, f64)> = Vec::new();
    if with_poses {
        let (ti, tj) = (edge.from.t, edge.to.t);
        if ti == tj {
            if let Some(&a) = pose_index.get(&ti) {
                sides.push((a, 0.0));
            }
        } else {
            if let Some(&a) = pose_index.get(&ti) {
                sides.push((a, 1.0));
            }
            if let Some(&b) = pose_index.get(&tj) {
                sides.push((b, -1.0));
            }
        }
    }

    let mut blocks = EdgeBlocks {
        node,
        b: Vec::new(),
        v: Vec::new(),
        e: Vec::new(),
        c: if with_depths { vec![0.0; n] } else { Vec::new() },
        w: if with_depths { vec![0.0; n] } else { Vec::new() },
    };
    let mut b_acc = vec![vec![Matrix6::zeros(); sides.len()]; sides.len()];
    let mut v_acc = vec![Vector6::zeros(); sides.len()];
    let mut e_acc = vec![vec![Vector6::zeros(); if with_depths { n } else { 0 }]; sides.len()];

    for idx in 0..n {
        if !lin.valid[idx] {
            continue;
        }
        let wt = conf[idx];
        let r = lin.residuals[idx];
        let jd = lin.j_depth[idx];
        let wr = Vector2::new(wt[0] * r.x, wt[1] * r.y);
        let wjd = Vector2::new(wt[0] * jd.x, wt[1] * jd.y);
        let js: Vec<Matrix2x6<f64>> = sides.iter().map(|&(_, s)| lin.j_pose_out[idx] * s).collect();
        for (a, ja) in js.iter().enumerate() {
            let wja = Matrix2x6::from_rows(&[ja.row(0) * wt[0], ja.row(1) * wt[1]]);
            for (b, jb) in js.iter().enumerate() {
                b_acc[a][b] += wja.transpose() * jb;
            }
            v_acc[a] -= ja.transpose() * wr;
            if with_depths {
                e_acc[a][idx] = ja.transpose() * wjd;
            }
        }
        if with_depths {
            blocks.c[idx] = jd.dot(&wjd);
            blocks.w[idx] = -jd.dot(&wr);
        }
    }
    for (a, &(ia, _)) in sides.iter().enumerate() {
        for (b, &(ib, _)) in sides.iter().enumerate() {
            blocks.b.push((ia, ib, b_acc[a][b]));
        }
        blocks.v.push((ia, v_acc[a]));
        if with_depths {
            blocks.e.push((ia, std::mem::take(&mut e_acc[a])));
        }
    }
    Ok(blocks)
}

/// Scatters per-edge blocks into the global system.
pub fn assemble(p: &DbaProblem, cfg: &DbaConfig) -> Result<NormalEquations, DbaError> {
    cfg.validate()?;
    p.validate()?;
    let solve_poses = !cfg.fix_poses;
    let solve_depths = !cfg.fix_depths;
    let free_timesteps = if solve_poses { p.free_timesteps() } else { Vec::new() };
    if !solve_depths && free_timesteps.is_empty() {
        return Err(DbaError::NoFreeVariables);
    }
    let pose_index: BTreeMap<usize, usize> = free_timesteps.iter().enumerate().map(|(i, &t)| (t, i)).collect();
    let nodes: Vec<FrameId> = p.depths.keys().copied().collect();
    let node_index: BTreeMap<FrameId, usize> = nodes.iter().enumerate().map(|(i, &f)| (f, i)).collect();

    let per_edge = parallel::map_collect(&p.edges, |e| edge_blocks(p, e, &pose_index, node_index[&e.from], solve_poses, solve_depths));

    let dim = 6 * free_timesteps.len();
    let mut ne = NormalEquations {
        b: DMatrix::zeros(dim, dim),
        v: DVector::zeros(dim),
        e: BTreeMap::new(),
        c: if solve_depths { nodes.iter().map(|f| vec![0.0; p.depths[f].len()]).collect() } else { Vec::new() },
        w: if solve_depths { nodes.iter().map(|f| vec![0.0; p.depths[f].len()]).collect() } else { Vec::new() },
        free_timesteps,
        nodes,
        solve_poses,
        solve_depths,
    };
    for blocks in per_edge {
        let blocks = blocks?;
        for (a, b, m) in blocks.b {
            let mut view = ne.b.fixed_view_mut::<6, 6>(6 * a, 6 * b);
            view += m;
        }
        for (a, vec) in blocks.v {
            let mut view = ne.v.fixed_rows_mut::<6>(6 * a);
            view += vec;
        }
        for (a, col) in blocks.e {
            let entry = ne.e.entry((a, blocks.node)).or_insert_with(|| vec![Vector6::zeros(); col.len()]);
            for (acc, x) in entry.iter_mut().zip(col) {
                *acc += x;
            }
        }
        if solve_depths {
            for (acc, x) in ne.c[blocks.node].iter_mut().zip(&blocks.c) {
                *acc += x;
            }
            for (acc, x) in ne.w[blocks.node].iter_mut().zip(&blocks.w) {
                *acc += x;
            }
        }
    }
    Ok(ne)
}

/// Dense Cholesky factorization returning the lower factor, or the first
/// non-positive pivot.
pub fn cholesky(a: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64), DbaError> {
    let n = a.nrows();
    let mut l = DMatrix::zeros(n, n);
    let mut min_pivot = f64::INFINITY;
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) {
            return Err(DbaError::NotPositiveDefinite { pivot: d, row: j });
        }
        min_pivot = min_pivot.min(d);
        let ljj = d.sqrt();
        l[(j, j)] = ljj;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Ok((l, min_pivot))
}

fn cholesky_solve(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = l.nrows();
    let mut y = b.clone();
    for i in 0..n {
        let mut s = y[i];
        for k in 0..i {
            s -= l[(i, k)] * y[k];
        }
        y[i] = s / l[(i, i)];
    }
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[(k, i)] * y[k];
        }
        y[i] = s / l[(i, i)];
    }
    y
}

/// Solution of the damped normal equations.
#[derive(Clone, Debug, PartialEq)]
pub struct Update {
    pub free_timesteps: Vec<usize>,
    pub nodes: Vec<FrameId>,
    pub pose: Vec<Twist>,
    pub depth: Vec<Vec<f64>>,
    /// Smallest Cholesky pivot of the reduced pose system (`inf` if none).
    pub min_pivot: f64,
}

fn inv_damped(c: f64, damping: f64) -> f64 {
    let d = c + damping;
    if d > 0.0 {
        1.0 / d
    } else {
        0.0
    }
}

pub fn schur_solve(ne: &NormalEquations, cfg: &DbaConfig) -> Result<Update, DbaError> {
    let dim = ne.pose_dim();
    let lambda = cfg.damping;
    let q: Vec<Vec<f64>> = ne.c.iter().map(|c| c.iter().map(|&x| inv_damped(x, lambda)).collect()).collect();

    let mut min_pivot = f64::INFINITY;
    let dxi = if ne.solve_poses && dim > 0 {
        let mut s = ne.b.clone();
        let mut rhs = ne.v.clone();
        if ne.solve_depths {
            // group coupling blocks by node
            let mut by_node: BTreeMap<usize, Vec<(usize, &Vec<Vector6<f64>>)>> = BTreeMap::new();
            for (&(a, node), col) in &ne.e {
                by_node.entry(node).or_default().push((a, col));
            }
            let node_list: Vec<(usize, Vec<(usize, &Vec<Vector6<f64>>)>)> = by_node.into_iter().collect();
            let reductions = parallel::map_collect(&node_list, |(node, cols)| {
                let qn = &q[*node];
                let wn = &ne.w[*node];
                let mut blocks = Vec::new();
                let mut rhs_parts = Vec::new();
                for &(a, ea) in cols {
                    let mut g = Vector6::zeros();
                    for (idx, x) in ea.iter().enumerate() {
                        g += x * (qn[idx] * wn[idx]);
                    }
                    rhs_parts.push((a, g));
                    for &(b, eb) in cols {
                        let mut m = Matrix6::zeros();
                        for idx in 0..ea.len() {
                            if qn[idx] != 0.0 {
                                m += ea[idx] * eb[idx].transpose() * qn[idx];
                            }
                        }
                        blocks.push((a, b, m));
                    }
                }
                (blocks, rhs_parts)
            });
            for (blocks, rhs_parts) in reductions {
                for (a, b, m) in blocks {
                    let mut view = s.fixed_view_mut::<6, 6>(6 * a, 6 * b);
                    view -= m;
                }
                for (a, g) in rhs_parts {
                    let mut view = rhs.fixed_rows_mut::<6>(6 * a);
                    view -= g;
                }
            }
        }
        let (l, pivot) = cholesky(&s)?;
        min_pivot = pivot;
        cholesky_solve(&l, &rhs)
    } else {
        DVector::zeros(dim)
    };

    let depth = if ne.solve_depths {
        ne.nodes
            .iter()
            .enumerate()
            .map(|(node, _)| {
                let mut rhs = ne.w[node].clone();
                for (a, _) in ne.free_timesteps.iter().enumerate() {
                    if let Some(col) = ne.e.get(&(a, node)) {
                        let xi = dxi.fixed_rows::<6>(6 * a);
                        for (r, x) in rhs.iter_mut().zip(col) {
                            *r -= x.dot(&xi);
                        }
                    }
                }
                rhs.iter().zip(&q[node]).map(|(r, q)| r * q).collect()
            })
            .collect()
    } else {
        Vec::new()
    };

    let pose = (0..ne.free_timesteps.len())
        .map(|a| Twist::from_vector(&dxi.fixed_rows::<6>(6 * a).into_owned()))
        .collect();
    Ok(Update {
        free_timesteps: ne.free_timesteps.clone(),
        nodes: ne.nodes.clone(),
        pose,
        depth,
        min_pivot,
    })
}

/// Applies `P <- exp(dxi) P` and `d <- max(d + dd, d_floor)`.
pub fn apply_update(p: &mut DbaProblem, update: &Update, d_floor: f64) {
    for (t, xi) in update.free_timesteps.iter().zip(&update.pose) {
        let pose = p.poses.get_mut(t).expect("free timestep has a pose");
        *pose = se3_exp(xi) * *pose;
    }
    for (f, dd) in update.nodes.iter().zip(&update.depth) {
        let field = p.depths.get_mut(f).expect("node has a depth field");
        for (d, delta) in field.values.iter_mut().zip(dd) {
            *d = (*d + delta).max(d_floor);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundDiagnostics {
    pub energy_before: f64,
    pub energy_after: f64,
    pub min_pivot: f64,
    pub max_pose_update: f64,
    pub max_depth_update: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub energy_before: f64,
    pub energy_after: f64,
    pub rounds: Vec<RoundDiagnostics>,
}

/// Runs `cfg.gn_steps_per_call` rounds of assemble, solve and update.
pub fn dba_step(p: &mut DbaProblem, cfg: &DbaConfig) -> Result<StepDiagnostics, DbaError> {
    cfg.validate()?;
    let energy_before = energy(p)?;
    let mut current = energy_before;
    let mut rounds = Vec::with_capacity(cfg.gn_steps_per_call);
    for _ in 0..cfg.gn_steps_per_call {
        let ne = assemble(p, cfg)?;
        let update = schur_solve(&ne, cfg)?;
        apply_update(p, &update, cfg.d_floor);
        let after = energy(p)?;
        rounds.push(RoundDiagnostics {
            energy_before: current,
            energy_after: after,
            min_pivot: update.min_pivot,
            max_pose_update: update.pose.iter().map(|x| x.norm()).fold(0.0, f64::max),
            max_depth_update: update.depth.iter().flatten().map(|x| x.abs()).fold(0.0, f64::max),
        });
        current = after;
    }
    Ok(StepDiagnostics { energy_before, energy_after: current, rounds })
}
