//! Procedural rigs, trajectories, inverse-depth fields and a flow oracle.
//!
//! All generation is a pure function of the specs and seeds. Depth values are
//! rounded to `f32` so scenes survive the binary grid format bit-exactly.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;

use nalgebra::{UnitQuaternion, Vector3, Vector6};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::covis::{Edge, FrameId};
use crate::dba::InverseDepthField;
use crate::flow::{induced_flow, ConfidenceField};
use crate::geometry::{relative_pose, se3_exp, Camera, Intrinsics, Pose, Rig, Twist, DEFAULT_EPSILON_Z};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("no depth for frame {0}")]
    MissingDepth(FrameId),
    #[error("no pose for timestep {0}")]
    MissingPose(usize),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, SimError> {
    Err(SimError::InvalidSpec(msg.into()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RigSpec {
    pub n_cameras: usize,
    pub fov_deg: f64,
    pub ring_radius: f64,
    pub width: u32,
    pub height: u32,
    /// Yaw between neighbouring cameras; `None` spreads them evenly.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub yaw_step_deg: Option<f64>,
}

impl Default for RigSpec {
    fn default() -> Self {
        Self { n_cameras: 6, fov_deg: 70.0, ring_radius: 0.1, width: 16, height: 12, yaw_step_deg: None }
    }
}

impl RigSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.n_cameras == 0 {
            return invalid("n_cameras must be at least 1");
        }
        if !(10.0..=170.0).contains(&self.fov_deg) {
            return invalid(format!("fov_deg {} outside [10, 170]", self.fov_deg));
        }
        if !(self.ring_radius >= 0.0 && self.ring_radius.is_finite()) {
            return invalid("ring_radius must be finite and non-negative");
        }
        if self.width == 0 || self.height == 0 {
            return invalid("image size must be positive");
        }
        if self.yaw_step_deg.is_some_and(|s| !s.is_finite()) {
            return invalid("yaw_step_deg must be finite");
        }
        Ok(())
    }
}

/// Cameras spaced in yaw on a ring around the rig origin, looking radially
/// outward. Camera 0 faces forward (+z of the rig). A single camera
/// sits at the origin with the identity extrinsic.
pub fn make_rig(spec: &RigSpec) -> Result<Rig, SimError> {
    spec.validate()?;
    let fx = 0.5 * spec.width as f64 / (0.5 * spec.fov_deg.to_radians()).tan();
    let intr = Intrinsics::new(fx, fx, 0.5 * (spec.width as f64 - 1.0), 0.5 * (spec.height as f64 - 1.0), spec.width, spec.height)
        .map_err(|e| SimError::InvalidSpec(e.to_string()))?;
    let step = spec.yaw_step_deg.map_or(2.0 * PI / spec.n_cameras as f64, f64::to_radians);
    let cameras = (0..spec.n_cameras)
        .map(|k| {
            let yaw = step * k as f64;
            let extrinsic = if spec.n_cameras == 1 {
                Pose::identity()
            } else {
                let rotation = UnitQuaternion::from_axis_angle(&Vector3::y_axis(), yaw);
                Pose::new(rotation, spec.ring_radius * Vector3::new(yaw.sin(), 0.0, yaw.cos()))
            };
            Camera { intrinsics: intr, extrinsic }
        })
        .collect();
    Rig::new(cameras, 0).map_err(|e| SimError::InvalidSpec(e.to_string()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryModel {
    Static,
    ForwardConstant,
    ForwardYaw,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrajectorySpec {
    pub model: TrajectoryModel,
    pub speed: f64,
    pub yaw_rate: f64,
    pub n_steps: usize,
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        Self { model: TrajectoryModel::ForwardYaw, speed: 0.15, yaw_rate: 0.02, n_steps: 12 }
    }
}

impl TrajectorySpec {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.n_steps == 0 {
            return invalid("n_steps must be at least 1");
        }
        if !self.speed.is_finite() || !self.yaw_rate.is_finite() {
            return invalid("speed and yaw_rate must be finite");
        }
        Ok(())
    }
}

/// Rig-to-world poses, one per step, starting at the identity.
///
/// `ForwardYaw` turns by `yaw_rate` and then advances `speed` along the new
/// heading, so step `k` has heading `k * yaw_rate`.
pub fn make_trajectory(spec: &TrajectorySpec) -> Result<Vec<Pose>, SimError> {
    spec.validate()?;
    let mut poses = Vec::with_capacity(spec.n_steps);
    let mut position = Vector3::zeros();
    for k in 0..spec.n_steps {
        let heading = match spec.model {
            TrajectoryModel::ForwardYaw => k as f64 * spec.yaw_rate,
            _ => 0.0,
        };
        let rotation = UnitQuaternion::from_axis_angle(&Vector3::y_axis(), heading);
        if k > 0 && spec.model != TrajectoryModel::Static {
            position += rotation * Vector3::new(0.0, 0.0, spec.speed);
        }
        poses.push(Pose::new(rotation, position));
    }
    Ok(poses)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DepthSpec {
    /// Nearest metric depth.
    pub d_near: f64,
    /// Farthest metric depth.
    pub d_far: f64,
}

impl Default for DepthSpec {
    fn default() -> Self {
        Self { d_near: 2.0, d_far: 8.0 }
    }
}

impl DepthSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.d_near > 0.0 && self.d_far > self.d_near && self.d_far.is_finite()) {
            return invalid(format!("depth range ({}, {}) must satisfy 0 < d_near < d_far", self.d_near, self.d_far));
        }
        Ok(())
    }

    /// Inverse-depth bounds `(1/d_far, 1/d_near)`.
    pub fn inverse_range(&self) -> (f64, f64) {
        (1.0 / self.d_far, 1.0 / self.d_near)
    }
}

const DEPTH_COMPONENTS: usize = 4;
/// Highest spatial frequency of the depth field, in cycles per image side.
const DEPTH_MAX_CYCLES: f64 = 1.5;

/// Largest per-pixel change of a generated field along x and y.
pub fn depth_gradient_bound(width: usize, height: usize, spec: &DepthSpec) -> (f64, f64) {
    let (lo, hi) = spec.inverse_range();
    let amp = 0.5 * (hi - lo);
    let omega = 2.0 * PI * DEPTH_MAX_CYCLES;
    // f32 rounding adds at most one ulp at each end
    let slack = 2.0 * f64::from(f32::EPSILON) * hi;
    (amp * omega / width as f64 + slack, amp * omega / height as f64 + slack)
}

fn f32_inward(lo: f64, hi: f64) -> (f64, f64) {
    let mut l = lo as f32;
    if f64::from(l) < lo {
        l = f32::from_bits(l.to_bits() + 1);
    }
    let mut h = hi as f32;
    if f64::from(h) > hi {
        h = f32::from_bits(h.to_bits() - 1);
    }
    (f64::from(l), f64::from(h))
}

/// Smooth random inverse-depth field: a normalized sum of low-frequency
/// sinusoids mapped into `[1/d_far, 1/d_near]`.
pub fn make_depth_field(seed: u64, width: usize, height: usize, spec: &DepthSpec) -> Result<InverseDepthField, SimError> {
    spec.validate()?;
    if width == 0 || height == 0 {
        return invalid("depth field size must be positive");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let comps: Vec<(f64, f64, f64, f64)> = (0..DEPTH_COMPONENTS)
        .map(|_| {
            let a: f64 = rng.random_range(0.2..1.0);
            let kx: f64 = rng.random_range(-DEPTH_MAX_CYCLES..DEPTH_MAX_CYCLES);
            let ky: f64 = rng.random_range(-DEPTH_MAX_CYCLES..DEPTH_MAX_CYCLES);
            let phase: f64 = rng.random_range(0.0..2.0 * PI);
            (a, kx, ky, phase)
        })
        .collect();
    let total: f64 = comps.iter().map(|c| c.0).sum();
    let (lo, hi) = spec.inverse_range();
    let (mid, amp) = (0.5 * (lo + hi), 0.5 * (hi - lo));
    let (qlo, qhi) = f32_inward(lo, hi);
    let values = (0..width * height)
        .map(|i| {
            let (x, y) = ((i % width) as f64 / width as f64, (i / width) as f64 / height as f64);
            let s: f64 = comps.iter().map(|&(a, kx, ky, ph)| a * (2.0 * PI * (kx * x + ky * y) + ph).sin()).sum();
            let v = mid + amp * s / total;
            f64::from(v as f32).clamp(qlo, qhi)
        })
        .collect();
    Ok(InverseDepthField::new(width, height, values))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSpec {
    /// Norm of the random twist applied to each free initial pose.
    pub pose_sigma: f64,
    /// Standard deviation of the per-pixel multiplicative depth noise.
    pub depth_rel_sigma: f64,
    /// Metric scale error of the initial state: depths and free translations
    /// are multiplied by this factor.
    pub scale_perturbation: f64,
    /// Fraction of pixels per edge given displaced, low-confidence targets.
    pub outlier_fraction: f64,
    /// Cameras whose confidence maps are zeroed, i.e. every edge leaving
    /// one of their frames.
    pub disabled_cameras: Vec<usize>,
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self { pose_sigma: 0.0, depth_rel_sigma: 0.0, scale_perturbation: 1.0, outlier_fraction: 0.0, disabled_cameras: Vec::new(), seed: 0 }
    }
}

pub const OUTLIER_DISPLACEMENT: f64 = 20.0;
pub const OUTLIER_MAX_CONFIDENCE: f64 = 0.1;
/// Per-pixel depth factors are drawn from `1 + N(0, sigma)` clipped to this band.
const DEPTH_FACTOR_BAND: (f64, f64) = (0.5, 1.5);

impl NoiseSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(0.0..=1.0).contains(&self.outlier_fraction) {
            return invalid("outlier_fraction must lie in [0, 1]");
        }
        if !(self.pose_sigma >= 0.0 && self.depth_rel_sigma >= 0.0) {
            return invalid("noise levels must be non-negative");
        }
        if !(self.scale_perturbation > 0.0 && self.scale_perturbation.is_finite()) {
            return invalid("scale_perturbation must be positive");
        }
        Ok(())
    }
}

/// Distinct RNG stream per edge, so targets do not depend on edge order.
fn edge_rng(seed: u64, edge: &Edge) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let code = ((edge.from.t as u64) << 40) ^ ((edge.from.c as u64) << 32) ^ ((edge.to.t as u64) << 8) ^ edge.to.c as u64;
    rng.set_stream(code);
    rng
}

fn frame_rng(seed: u64, f: FrameId, salt: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(((f.t as u64) << 16) ^ f.c as u64);
    rng
}

/// Ground-truth scene: rig, trajectory and one depth field per frame.
#[derive(Clone, Debug)]
pub struct Scene {
    pub rig: Rig,
    pub trajectory: Vec<Pose>,
    pub depths: BTreeMap<FrameId, InverseDepthField>,
}

pub fn make_scene(rig: &RigSpec, traj: &TrajectorySpec, depth: &DepthSpec, seed: u64) -> Result<Scene, SimError> {
    let r = make_rig(rig)?;
    let trajectory = make_trajectory(traj)?;
    let mut depths = BTreeMap::new();
    for t in 0..trajectory.len() {
        for c in 0..r.len() {
            let f = FrameId::new(t, c);
            let s = frame_rng(seed, f, 1).random::<u64>();
            depths.insert(f, make_depth_field(s, rig.width as usize, rig.height as usize, depth)?);
        }
    }
    Ok(Scene { rig: r, trajectory, depths })
}

/// Oracle flow for one edge.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleEdge {
    pub targets: Vec<[f64; 2]>,
    pub confidence: ConfidenceField,
    /// Projection validity at ground truth.
    pub valid: Vec<bool>,
    /// Pixels whose target was displaced, ascending.
    pub outliers: Vec<usize>,
}

pub fn oracle_edge(
    rig: &Rig,
    trajectory: &[Pose],
    depths: &BTreeMap<FrameId, InverseDepthField>,
    edge: &Edge,
    noise: &NoiseSpec,
) -> Result<OracleEdge, SimError> {
    let d = depths.get(&edge.from).ok_or(SimError::MissingDepth(edge.from))?;
    let p_ti = trajectory.get(edge.from.t).ok_or(SimError::MissingPose(edge.from.t))?;
    let p_tj = trajectory.get(edge.to.t).ok_or(SimError::MissingPose(edge.to.t))?;
    let (ci, cj) = (rig.camera(edge.from.c), rig.camera(edge.to.c));
    let g = relative_pose(p_ti, p_tj, &ci.extrinsic, &cj.extrinsic);
    let flow = induced_flow(d, &g, &ci.intrinsics, &cj.intrinsics, DEFAULT_EPSILON_Z);
    let mut targets = flow.targets();
    // a correspondence that leaves the target image is unobservable
    let (wj, hj) = (cj.intrinsics.width as f64, cj.intrinsics.height as f64);
    let valid: Vec<bool> = flow
        .valid
        .iter()
        .zip(&targets)
        .map(|(&v, t)| v && t[0] >= -0.5 && t[0] <= wj - 0.5 && t[1] >= -0.5 && t[1] <= hj - 0.5)
        .collect();
    let disabled = noise.disabled_cameras.contains(&edge.from.c);
    let base = if disabled { 0.0 } else { 1.0 };
    let mut confidence: Vec<[f64; 2]> = valid.iter().map(|&v| if v { [base; 2] } else { [0.0; 2] }).collect();

    let n = d.len();
    let n_out = (noise.outlier_fraction * n as f64).floor() as usize;
    let mut outliers = Vec::new();
    if n_out > 0 {
        let mut rng = edge_rng(noise.seed, edge);
        outliers = sample(&mut rng, n, n_out).into_vec();
        outliers.sort_unstable();
        for &i in &outliers {
            let dx = rng.random_range(-OUTLIER_DISPLACEMENT..=OUTLIER_DISPLACEMENT);
            let dy = rng.random_range(-OUTLIER_DISPLACEMENT..=OUTLIER_DISPLACEMENT);
            let w = rng.random_range(0.0..=OUTLIER_MAX_CONFIDENCE);
            targets[i] = [targets[i][0] + dx, targets[i][1] + dy];
            if valid[i] {
                confidence[i] = [w * base; 2];
            }
        }
    }
    Ok(OracleEdge {
        targets,
        confidence: ConfidenceField::new(d.width, d.height, confidence).expect("oracle confidences lie in [0, 1]"),
        valid,
        outliers,
    })
}

pub fn oracle_targets(
    rig: &Rig,
    trajectory: &[Pose],
    depths: &BTreeMap<FrameId, InverseDepthField>,
    edges: &[Edge],
    noise: &NoiseSpec,
) -> Result<BTreeMap<Edge, OracleEdge>, SimError> {
    noise.validate()?;
    let results = crate::parallel::map_collect(edges, |e| oracle_edge(rig, trajectory, depths, e, noise));
    edges.iter().zip(results).map(|(e, r)| r.map(|r| (*e, r))).collect()
}

/// Twist with a uniformly random direction and norm `sigma`.
pub fn random_twist(rng: &mut impl Rng, sigma: f64) -> Twist {
    let v: Vector6<f64> = Vector6::from_fn(|_, _| StandardNormal.sample(rng));
    let norm = v.norm();
    if norm == 0.0 || sigma == 0.0 {
        return Twist::zero();
    }
    Twist::from_vector(&(v * (sigma / norm)))
}

pub fn perturb_pose(pose: &Pose, t: usize, noise: &NoiseSpec) -> Pose {
    let mut rng = frame_rng(noise.seed, FrameId::new(t, 0), 2);
    se3_exp(&random_twist(&mut rng, noise.pose_sigma)) * *pose
}

pub fn perturb_depth(d: &InverseDepthField, f: FrameId, noise: &NoiseSpec) -> InverseDepthField {
    let mut rng = frame_rng(noise.seed, f, 3);
    let normal = Normal::new(0.0, noise.depth_rel_sigma.max(0.0)).expect("finite sigma");
    let values = d
        .values
        .iter()
        .map(|&v| {
            let factor = (1.0 + normal.sample(&mut rng)).clamp(DEPTH_FACTOR_BAND.0, DEPTH_FACTOR_BAND.1);
            v * factor / noise.scale_perturbation
        })
        .collect();
    InverseDepthField::new(d.width, d.height, values)
}

/// Perturbs every pose outside `fixed` and every depth field. Scaling acts
/// about the world origin, so `fixed` should hold the first (identity) pose.
pub fn perturb_state(
    poses: &mut BTreeMap<usize, Pose>,
    depths: &mut BTreeMap<FrameId, InverseDepthField>,
    fixed: &BTreeSet<usize>,
    noise: &NoiseSpec,
) {
    for (t, p) in poses.iter_mut() {
        if !fixed.contains(t) {
            let scaled = Pose::new(p.rotation, p.translation * noise.scale_perturbation);
            *p = perturb_pose(&scaled, *t, noise);
        }
    }
    for (f, d) in depths.iter_mut() {
        *d = perturb_depth(d, *f, noise);
    }
}
