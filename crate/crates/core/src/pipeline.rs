//! Incremental inference: warmup, initialization and the active phase.
//!
//! Flow comes from a [`FlowProvider`]; the pipeline owns the co-visibility
//! graph and the current estimate of every keyframe, builds a
//! [`DbaProblem`] over the graph window for each round and writes the solved
//! poses and depths back.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::covis::{CovisGraph, Edge, FrameId, GraphError, GraphParams};
use crate::dba::{dba_step, DbaConfig, DbaError, DbaProblem, EdgeObservation, InverseDepthField};
use crate::flow::ConfidenceField;
use crate::geometry::{Pose, Rig};
use crate::parallel;
use crate::simulator::{oracle_edge, NoiseSpec, Scene, SimError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("frame {0} is not part of the state")]
    MissingFrame(FrameId),
    #[error("stream ended after {admitted} of {needed} warmup frames")]
    StreamExhausted { admitted: usize, needed: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Dba(#[from] DbaError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Targets and confidences for one edge.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowEstimate {
    pub targets: Vec<[f64; 2]>,
    pub confidence: ConfidenceField,
    pub valid: Vec<bool>,
}

impl FlowEstimate {
    /// Mean of `|target - x|` over valid pixels, 0 if none are valid.
    pub fn mean_flow(&self) -> f64 {
        let w = self.confidence.width;
        let (sum, n) = self
            .targets
            .iter()
            .enumerate()
            .filter(|(i, _)| self.valid[*i])
            .fold((0.0, 0usize), |(s, n), (i, t)| (s + (t[0] - (i % w) as f64).hypot(t[1] - (i / w) as f64), n + 1));
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }
}

/// Source of flow targets for the solver.
pub trait FlowProvider: Sync {
    fn estimate(&self, state: &PipelineState, edge: &Edge) -> Result<FlowEstimate, PipelineError>;
}

/// Ground-truth flow from a simulated scene, with the scene's noise model.
#[derive(Clone, Debug)]
pub struct OracleProvider {
    pub scene: Scene,
    pub noise: NoiseSpec,
}

impl FlowProvider for OracleProvider {
    fn estimate(&self, _state: &PipelineState, edge: &Edge) -> Result<FlowEstimate, PipelineError> {
        let o = oracle_edge(&self.scene.rig, &self.scene.trajectory, &self.scene.depths, edge, &self.noise)?;
        Ok(FlowEstimate { targets: o.targets, confidence: o.confidence, valid: o.valid })
    }
}

/// Hook applied to the depth of every frame after a round; a learned
/// refiner would plug in here.
pub trait DepthRefiner: Sync {
    fn refine(&self, _frame: FrameId, _depth: &mut InverseDepthField) {}
}

pub struct NoRefinement;

impl DepthRefiner for NoRefinement {}

/// Initial depth for warmup frames.
#[derive(Clone, Debug)]
pub enum DepthInit {
    Constant { width: usize, height: usize, value: f64 },
    Fields(BTreeMap<FrameId, InverseDepthField>),
}

/// Initial values for warmup frames. Timesteps without a pose copy the
/// previous keyframe (or start at the identity).
#[derive(Clone, Debug)]
pub struct Initializer {
    pub poses: BTreeMap<usize, Pose>,
    pub depths: DepthInit,
}

impl Initializer {
    fn depth(&self, f: FrameId) -> Result<InverseDepthField, PipelineError> {
        match &self.depths {
            DepthInit::Constant { width, height, value } => Ok(InverseDepthField::constant(*width, *height, *value)),
            DepthInit::Fields(m) => m.get(&f).cloned().ok_or(PipelineError::MissingFrame(f)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub n_warmup: usize,
    pub warmup_flow_threshold: f64,
    pub n_itr_wm: usize,
    pub n_iter1: usize,
    pub n_iter2: usize,
    pub keyframe_flow_threshold: f64,
    pub depth_init_window: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            n_warmup: 3,
            warmup_flow_threshold: 1.75,
            n_itr_wm: 16,
            n_iter1: 4,
            n_iter2: 2,
            keyframe_flow_threshold: 1.75,
            depth_init_window: 4,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let counts = [self.n_warmup, self.n_itr_wm, self.n_iter1, self.n_iter2, self.depth_init_window];
        if counts.contains(&0) {
            return Err(PipelineError::InvalidConfig("all iteration counts and windows must be at least 1".into()));
        }
        if !(self.warmup_flow_threshold >= 0.0 && self.keyframe_flow_threshold >= 0.0) {
            return Err(PipelineError::InvalidConfig("flow thresholds must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Init,
    Active,
}

/// One provider refresh followed by one `dba_step` call.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub phase: Phase,
    /// Newest keyframe when the round ran.
    pub t: usize,
    pub round: usize,
    pub fix_depths: bool,
    pub n_edges: usize,
    pub energy_before: f64,
    pub energy_after: f64,
    pub min_pivot: f64,
}

#[derive(Clone, Debug)]
pub struct PipelineState {
    pub rig: Rig,
    pub graph: CovisGraph,
    /// Current estimate of every keyframe, including ones that left the window.
    pub poses: BTreeMap<usize, Pose>,
    pub depths: BTreeMap<FrameId, InverseDepthField>,
    /// Keyframe timesteps in admission order.
    pub keyframes: Vec<usize>,
    /// Timesteps dropped for low flow.
    pub removed: Vec<usize>,
    pub log: Vec<RoundRecord>,
}

impl PipelineState {
    pub fn new(rig: Rig, params: GraphParams) -> Result<Self, PipelineError> {
        let graph = CovisGraph::new(&rig, params)?;
        Ok(Self { rig, graph, poses: BTreeMap::new(), depths: BTreeMap::new(), keyframes: Vec::new(), removed: Vec::new(), log: Vec::new() })
    }

    /// DBA problem over the graph window, anchored at its oldest timestep.
    /// Observations are left empty.
    pub fn problem(&self) -> DbaProblem {
        let mut p = DbaProblem::new(self.rig.clone());
        p.edges = self.graph.edges().iter().copied().collect();
        for f in self.graph.nodes() {
            p.depths.insert(*f, self.depths[f].clone());
            p.poses.insert(f.t, self.poses[&f.t]);
        }
        if let Some(&oldest) = self.graph.timesteps().first() {
            p.anchor.insert(oldest);
        }
        p
    }

    fn insert_frames(&mut self, t: usize, pose: Pose, depths: Vec<InverseDepthField>) {
        self.poses.insert(t, pose);
        for (c, d) in depths.into_iter().enumerate() {
            self.depths.insert(FrameId::new(t, c), d);
        }
    }

    fn drop_frames(&mut self, t: usize) {
        self.poses.remove(&t);
        for c in 0..self.rig.len() {
            self.depths.remove(&FrameId::new(t, c));
        }
    }
}

/// Mean flow of the edge `(t, c) -> (t_prev, c)` as reported by the provider.
pub fn mean_flow(provider: &dyn FlowProvider, state: &PipelineState, camera: usize, t: usize, t_prev: usize) -> Result<f64, PipelineError> {
    for f in [FrameId::new(t, camera), FrameId::new(t_prev, camera)] {
        if !state.depths.contains_key(&f) || !state.poses.contains_key(&f.t) {
            return Err(PipelineError::MissingFrame(f));
        }
    }
    Ok(provider.estimate(state, &Edge::new(FrameId::new(t, camera), FrameId::new(t_prev, camera)))?.mean_flow())
}

/// Refreshes all edge observations and runs one `dba_step`.
pub fn run_round(
    state: &mut PipelineState,
    provider: &dyn FlowProvider,
    dba: &DbaConfig,
    fix_depths: bool,
    phase: Phase,
    round: usize,
) -> Result<Option<RoundRecord>, PipelineError> {
    let mut p = state.problem();
    p.min_depth = dba.min_depth;
    if p.edges.is_empty() || (fix_depths && p.free_timesteps().is_empty()) {
        return Ok(None);
    }
    let estimates = parallel::map_collect(&p.edges, |e| provider.estimate(state, e));
    for (e, est) in p.edges.iter().zip(estimates) {
        let est = est?;
        p.observations.insert(*e, EdgeObservation { targets: est.targets, confidence: est.confidence });
    }
    let cfg = DbaConfig { fix_depths, ..*dba };
    let diag = dba_step(&mut p, &cfg)?;
    for t in p.free_timesteps() {
        state.poses.insert(t, p.poses[&t]);
    }
    if !fix_depths {
        for (f, d) in p.depths {
            state.depths.insert(f, d);
        }
    }
    let record = RoundRecord {
        phase,
        t: state.keyframes.last().copied().unwrap_or(0),
        round,
        fix_depths,
        n_edges: p.edges.len(),
        energy_before: diag.energy_before,
        energy_after: diag.energy_after,
        min_pivot: diag.rounds.iter().map(|r| r.min_pivot).fold(f64::INFINITY, f64::min),
    };
    state.log.push(record.clone());
    Ok(Some(record))
}

fn refine_all(state: &mut PipelineState, refiner: &dyn DepthRefiner) {
    let nodes: Vec<FrameId> = state.graph.nodes().iter().copied().collect();
    for f in nodes {
        if let Some(d) = state.depths.get_mut(&f) {
            refiner.refine(f, d);
        }
    }
}

/// Admits stream timesteps whose reference-camera flow to the previous
/// keyframe reaches the warmup threshold, until `n_warmup` are admitted.
/// The first timestep is always admitted.
pub fn run_warmup(
    rig: &Rig,
    params: GraphParams,
    provider: &dyn FlowProvider,
    init: &Initializer,
    stream: &mut dyn Iterator<Item = usize>,
    cfg: &PipelineConfig,
) -> Result<PipelineState, PipelineError> {
    cfg.validate()?;
    let mut state = PipelineState::new(rig.clone(), params)?;
    let c_ref = rig.reference_camera;
    for t in stream {
        let prev = state.keyframes.last().copied();
        let pose = init.poses.get(&t).copied().or_else(|| prev.map(|p| state.poses[&p])).unwrap_or_else(Pose::identity);
        let depths = (0..rig.len()).map(|c| init.depth(FrameId::new(t, c))).collect::<Result<Vec<_>, _>>()?;
        state.insert_frames(t, pose, depths);
        let admit = match prev {
            None => true,
            Some(p) => mean_flow(provider, &state, c_ref, t, p)? >= cfg.warmup_flow_threshold,
        };
        if admit {
            state.graph.update(t)?;
            state.keyframes.push(t);
            if state.keyframes.len() == cfg.n_warmup {
                return Ok(state);
            }
        } else {
            state.drop_frames(t);
        }
    }
    Err(PipelineError::StreamExhausted { admitted: state.keyframes.len(), needed: cfg.n_warmup })
}

/// `n_itr_wm` rounds; depths are held fixed for the first half.
pub fn run_init(state: &mut PipelineState, provider: &dyn FlowProvider, dba: &DbaConfig, cfg: &PipelineConfig) -> Result<(), PipelineError> {
    for k in 0..cfg.n_itr_wm {
        run_round(state, provider, dba, k < cfg.n_itr_wm / 2, Phase::Init, k)?;
    }
    Ok(())
}

/// What one active step did.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActiveOutput {
    pub t: usize,
    pub mean_flow: f64,
    pub removed: Option<usize>,
}

/// Elementwise mean of the last `window` keyframe depths of camera `c`.
pub fn window_mean_depth(state: &PipelineState, c: usize, window: usize) -> Option<InverseDepthField> {
    let recent: Vec<&InverseDepthField> = state.keyframes.iter().rev().take(window).map(|t| &state.depths[&FrameId::new(*t, c)]).collect();
    let first = recent.first()?;
    let n = recent.len() as f64;
    let values = (0..first.len()).map(|i| recent.iter().map(|d| d.values[i]).sum::<f64>() / n).collect();
    Some(InverseDepthField::new(first.width, first.height, values))
}

/// Adds timestep `t`, optimizes, and drops the previous keyframe if the
/// reference camera barely moved.
pub fn step_active(
    state: &mut PipelineState,
    provider: &dyn FlowProvider,
    refiner: &dyn DepthRefiner,
    t: usize,
    dba: &DbaConfig,
    cfg: &PipelineConfig,
) -> Result<ActiveOutput, PipelineError> {
    let prev = *state.keyframes.last().ok_or(PipelineError::InvalidConfig("active step before warmup".into()))?;
    let depths = (0..state.rig.len())
        .map(|c| window_mean_depth(state, c, cfg.depth_init_window).ok_or(PipelineError::MissingFrame(FrameId::new(prev, c))))
        .collect::<Result<Vec<_>, _>>()?;
    let pose = state.poses[&prev];
    state.insert_frames(t, pose, depths);
    state.graph.update(t)?;
    state.keyframes.push(t);

    for k in 0..cfg.n_iter1 {
        run_round(state, provider, dba, false, Phase::Active, k)?;
    }
    let flow = mean_flow(provider, state, state.rig.reference_camera, t, prev)?;
    let mut removed = None;
    if flow < cfg.keyframe_flow_threshold && state.keyframes.len() > 1 {
        state.graph.remove_timestep(prev)?;
        // relink the new frame against its new neighbours
        state.graph.remove_timestep(t)?;
        state.graph.update(t)?;
        state.keyframes.retain(|&k| k != prev);
        state.drop_frames(prev);
        state.removed.push(prev);
        removed = Some(prev);
    } else {
        for k in 0..cfg.n_iter2 {
            run_round(state, provider, dba, false, Phase::Active, cfg.n_iter1 + k)?;
        }
    }
    refine_all(state, refiner);
    Ok(ActiveOutput { t, mean_flow: flow, removed })
}

/// Warmup, initialization, then one active step per remaining timestep.
pub fn run_sequence(
    rig: &Rig,
    params: GraphParams,
    provider: &dyn FlowProvider,
    init: &Initializer,
    timesteps: impl IntoIterator<Item = usize>,
    dba: &DbaConfig,
    cfg: &PipelineConfig,
) -> Result<(PipelineState, Vec<ActiveOutput>), PipelineError> {
    let mut stream = timesteps.into_iter();
    let mut state = run_warmup(rig, params, provider, init, &mut stream, cfg)?;
    run_init(&mut state, provider, dba, cfg)?;
    let mut outputs = Vec::new();
    for t in stream {
        outputs.push(step_active(&mut state, provider, &NoRefinement, t, dba, cfg)?);
    }
    Ok((state, outputs))
}
