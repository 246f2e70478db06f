//! Multi-camera co-visibility graph.
//!
//! Nodes are `(timestep, camera)` frames. Three edge kinds connect them:
//! temporal edges join frames of the same camera a few keyframes apart,
//! spatial edges join overlapping cameras at the same timestep, and
//! spatial-temporal edges join a camera to an overlapping, more
//! forward-facing camera at an earlier timestep. Old edges fall out of
//! per-kind sliding windows and orphaned nodes are dropped.
//!
//! Radii and windows are measured in keyframe ordinals: when a timestep is
//! removed with [`CovisGraph::remove_timestep`] the neighbouring keyframes
//! become adjacent.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{project, unproject, Intrinsics, Pose, Rig, DEFAULT_EPSILON_Z};
use crate::parallel;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("timestep {0} is already in the graph")]
    DuplicateTimestep(usize),
    #[error("timestep {t} is older than the newest timestep {newest}")]
    OutOfOrder { t: usize, newest: usize },
    #[error("timestep {0} is not in the graph")]
    UnknownTimestep(usize),
    #[error("invalid graph parameters: {0}")]
    InvalidParams(String),
    #[error("cannot parse edge line {line:?}: {reason}")]
    Parse { line: String, reason: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FrameId {
    pub t: usize,
    pub c: usize,
}

impl FrameId {
    pub fn new(t: usize, c: usize) -> Self {
        Self { t, c }
    }
}

impl fmt::Display for FrameId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.t, self.c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EdgeKind {
    Temporal,
    Spatial,
    SpatialTemporal,
}

impl EdgeKind {
    /// Kind implied by the endpoints; `None` for a self-loop.
    pub fn classify(from: FrameId, to: FrameId) -> Option<Self> {
        match (from.t == to.t, from.c == to.c) {
            (true, true) => None,
            (false, true) => Some(EdgeKind::Temporal),
            (true, false) => Some(EdgeKind::Spatial),
            (false, false) => Some(EdgeKind::SpatialTemporal),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            EdgeKind::Temporal => "temporal",
            EdgeKind::Spatial => "spatial",
            EdgeKind::SpatialTemporal => "spatial_temporal",
        }
    }

    pub const ALL: [EdgeKind; 3] = [EdgeKind::Temporal, EdgeKind::Spatial, EdgeKind::SpatialTemporal];
}

impl FromStr for EdgeKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "temporal" => Ok(EdgeKind::Temporal),
            "spatial" => Ok(EdgeKind::Spatial),
            "spatial_temporal" => Ok(EdgeKind::SpatialTemporal),
            other => Err(format!("unknown edge kind {other:?}")),
        }
    }
}

/// Directed edge; residuals are defined on the `from` frame's pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub from: FrameId,
    pub to: FrameId,
}

impl Edge {
    pub fn new(from: FrameId, to: FrameId) -> Self {
        Self { from, to }
    }

    pub fn kind(&self) -> EdgeKind {
        EdgeKind::classify(self.from, self.to).expect("edges are never self-loops")
    }

    pub fn reversed(&self) -> Edge {
        Edge::new(self.to, self.from)
    }

    /// Line of the edge dump format: `t_i c_i t_j c_j kind`.
    pub fn dump_line(&self) -> String {
        format!("{} {} {} {} {}", self.from.t, self.from.c, self.to.t, self.to.c, self.kind().as_str())
    }

    pub fn parse_line(line: &str) -> Result<Edge, GraphError> {
        let err = |reason: &str| GraphError::Parse { line: line.to_owned(), reason: reason.to_owned() };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(err("expected 5 fields"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|e| err(&e.to_string()));
        let edge = Edge::new(FrameId::new(num(fields[0])?, num(fields[1])?), FrameId::new(num(fields[2])?, num(fields[3])?));
        let kind = EdgeKind::from_str(fields[4]).map_err(|e| err(&e))?;
        match EdgeKind::classify(edge.from, edge.to) {
            None => Err(err("self-loop")),
            Some(k) if k != kind => Err(err("kind does not match endpoints")),
            Some(_) => Ok(edge),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphParams {
    pub dt_intra: usize,
    pub r_intra: usize,
    pub dt_inter: usize,
    pub r_inter: usize,
}

impl Default for GraphParams {
    fn default() -> Self {
        Self { dt_intra: 3, r_intra: 2, dt_inter: 2, r_inter: 2 }
    }
}

impl GraphParams {
    pub fn validate(&self) -> Result<(), GraphError> {
        if self.r_intra > self.dt_intra {
            return Err(GraphError::InvalidParams("r_intra must not exceed dt_intra".into()));
        }
        if self.r_inter > self.dt_inter {
            return Err(GraphError::InvalidParams("r_inter must not exceed dt_inter".into()));
        }
        Ok(())
    }

    /// Keyframe span of the widest window.
    pub fn max_window(&self) -> usize {
        self.dt_intra.max(self.dt_inter)
    }
}

/// Sampling parameters for the static camera-overlap test.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdjacencyConfig {
    /// Samples per image axis.
    pub grid: usize,
    /// Minimum fraction of samples that must land inside the other camera.
    pub threshold: f64,
    pub inv_depth: f64,
}

impl Default for AdjacencyConfig {
    fn default() -> Self {
        Self { grid: 16, threshold: 0.05, inv_depth: 1.0 }
    }
}

fn grid_coordinate(k: usize, n: usize, extent: u32) -> f64 {
    // sample centers of n equal cells spanning [-0.5, extent - 0.5]
    (k as f64 + 0.5) * extent as f64 / n as f64 - 0.5
}

fn inside_image(intr: &Intrinsics, x: [f64; 2]) -> bool {
    x[0] >= -0.5 && x[1] >= -0.5 && x[0] <= intr.width as f64 - 0.5 && x[1] <= intr.height as f64 - 0.5
}

/// Fraction of a `grid x grid` sample of camera `ci`'s image, unprojected at
/// `inv_depth`, that projects inside camera `cj`'s image.
pub fn overlap_ratio(rig: &Rig, ci: usize, cj: usize, grid: usize, inv_depth: f64) -> f64 {
    let (a, b) = (rig.camera(ci), rig.camera(cj));
    let to_j = b.extrinsic.inverse() * a.extrinsic;
    let mut hits = 0usize;
    for gy in 0..grid {
        for gx in 0..grid {
            let u = grid_coordinate(gx, grid, a.intrinsics.width);
            let v = grid_coordinate(gy, grid, a.intrinsics.height);
            let x = to_j.transform_homo(&unproject(&a.intrinsics, u, v, inv_depth));
            if let Ok(px) = project(&b.intrinsics, &x, DEFAULT_EPSILON_Z) {
                if inside_image(&b.intrinsics, px) {
                    hits += 1;
                }
            }
        }
    }
    hits as f64 / (grid * grid) as f64
}

/// Ordered pairs of distinct cameras whose frustums overlap.
pub fn static_adjacency(rig: &Rig) -> BTreeSet<(usize, usize)> {
    static_adjacency_with(rig, &AdjacencyConfig::default())
}

pub fn static_adjacency_with(rig: &Rig, cfg: &AdjacencyConfig) -> BTreeSet<(usize, usize)> {
    let n = rig.len();
    let mut out = BTreeSet::new();
    for ci in 0..n {
        for cj in 0..n {
            if ci != cj && overlap_ratio(rig, ci, cj, cfg.grid, cfg.inv_depth) > cfg.threshold {
                out.insert((ci, cj));
            }
        }
    }
    out
}

/// Counts of edges per kind.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KindCounts {
    pub temporal: usize,
    pub spatial: usize,
    pub spatial_temporal: usize,
}

impl KindCounts {
    pub fn from_edges<'a>(edges: impl IntoIterator<Item = &'a Edge>) -> Self {
        let mut k = KindCounts::default();
        for e in edges {
            match e.kind() {
                EdgeKind::Temporal => k.temporal += 1,
                EdgeKind::Spatial => k.spatial += 1,
                EdgeKind::SpatialTemporal => k.spatial_temporal += 1,
            }
        }
        k
    }

    pub fn total(&self) -> usize {
        self.temporal + self.spatial + self.spatial_temporal
    }
}

const YAW_TIE: f64 = 1e-9;

#[derive(Clone, Debug)]
pub struct CovisGraph {
    params: GraphParams,
    n_cameras: usize,
    adjacency: BTreeSet<(usize, usize)>,
    yaw: Vec<f64>,
    /// Keyframe timesteps in insertion order; position is the ordinal.
    timeline: Vec<usize>,
    nodes: BTreeSet<FrameId>,
    edges: BTreeSet<Edge>,
}

impl CovisGraph {
    pub fn new(rig: &Rig, params: GraphParams) -> Result<Self, GraphError> {
        Self::with_adjacency(rig, params, static_adjacency(rig))
    }

    pub fn with_adjacency(rig: &Rig, params: GraphParams, adjacency: BTreeSet<(usize, usize)>) -> Result<Self, GraphError> {
        params.validate()?;
        Ok(Self {
            params,
            n_cameras: rig.len(),
            adjacency,
            yaw: (0..rig.len()).map(|c| rig.yaw_from_reference(c)).collect(),
            timeline: Vec::new(),
            nodes: BTreeSet::new(),
            edges: BTreeSet::new(),
        })
    }

    pub fn params(&self) -> &GraphParams {
        &self.params
    }

    pub fn n_cameras(&self) -> usize {
        self.n_cameras
    }

    pub fn adjacency(&self) -> &BTreeSet<(usize, usize)> {
        &self.adjacency
    }

    pub fn nodes(&self) -> &BTreeSet<FrameId> {
        &self.nodes
    }

    pub fn edges(&self) -> &BTreeSet<Edge> {
        &self.edges
    }

    pub fn contains_node(&self, f: FrameId) -> bool {
        self.nodes.contains(&f)
    }

    pub fn contains_edge(&self, e: &Edge) -> bool {
        self.edges.contains(e)
    }

    /// Distinct timesteps that still have nodes, ascending.
    pub fn timesteps(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self.nodes.iter().map(|n| n.t).collect();
        set.into_iter().collect()
    }

    pub fn newest(&self) -> Option<usize> {
        self.timeline.last().copied()
    }

    /// Keyframe ordinal of a timestep still on the timeline.
    pub fn ordinal(&self, t: usize) -> Option<usize> {
        self.timeline.iter().position(|&x| x == t)
    }

    pub fn outgoing(&self, f: FrameId) -> impl Iterator<Item = &Edge> {
        self.edges.range(Edge::new(f, FrameId::new(0, 0))..).take_while(move |e| e.from == f)
    }

    pub fn degree(&self, f: FrameId) -> usize {
        self.edges.iter().filter(|e| e.from == f || e.to == f).count()
    }

    pub fn counts(&self) -> KindCounts {
        KindCounts::from_edges(&self.edges)
    }

    /// True when `cj` faces at least as far forward as `ci`.
    pub fn is_forward_of(&self, cj: usize, ci: usize) -> bool {
        self.yaw[cj] <= self.yaw[ci] + YAW_TIE
    }

    /// Inserts the frames of timestep `t` and updates edges and windows.
    pub fn update(&mut self, t: usize) -> Result<(), GraphError> {
        if self.timeline.contains(&t) || self.nodes.iter().any(|n| n.t == t) {
            return Err(GraphError::DuplicateTimestep(t));
        }
        if let Some(newest) = self.newest() {
            if t < newest {
                return Err(GraphError::OutOfOrder { t, newest });
            }
        }
        let s = self.timeline.len();
        self.timeline.push(t);
        let p = self.params;
        let existing: Vec<(usize, usize)> = self.timesteps().into_iter().filter_map(|ts| self.ordinal(ts).map(|o| (ts, o))).collect();

        for c in 0..self.n_cameras {
            self.nodes.insert(FrameId::new(t, c));
        }

        for &(t_old, o) in &existing {
            let gap = s - o;
            if gap < p.r_intra && o + p.dt_intra >= s {
                for c in 0..self.n_cameras {
                    let old = FrameId::new(t_old, c);
                    if self.nodes.contains(&old) {
                        self.add_pair(FrameId::new(t, c), old);
                    }
                }
            }
        }

        for &(ci, cj) in &self.adjacency.clone() {
            self.edges.insert(Edge::new(FrameId::new(t, ci), FrameId::new(t, cj)));
        }

        for &(t_old, o) in &existing {
            let gap = s - o;
            if gap >= 1 && gap <= p.r_inter && o + p.dt_inter >= s {
                for &(ci, cj) in &self.adjacency.clone() {
                    let old = FrameId::new(t_old, cj);
                    if self.is_forward_of(cj, ci) && self.nodes.contains(&old) {
                        self.add_pair(FrameId::new(t, ci), old);
                    }
                }
            }
        }

        self.prune(s);
        Ok(())
    }

    fn add_pair(&mut self, a: FrameId, b: FrameId) {
        self.edges.insert(Edge::new(a, b));
        self.edges.insert(Edge::new(b, a));
    }

    fn prune(&mut self, s: usize) {
        let p = self.params;
        let ord: BTreeMap<usize, usize> = self.timeline.iter().enumerate().map(|(o, &t)| (t, o)).collect();
        let in_window = |t: usize, dt: usize| ord.get(&t).is_some_and(|&o| o + dt >= s);
        self.edges.retain(|e| {
            let dt = match e.kind() {
                EdgeKind::Temporal => p.dt_intra,
                EdgeKind::Spatial | EdgeKind::SpatialTemporal => p.dt_inter,
            };
            in_window(e.from.t, dt) && in_window(e.to.t, dt)
        });
        let newest = self.timeline[s];
        let connected: BTreeSet<FrameId> = self.edges.iter().flat_map(|e| [e.from, e.to]).collect();
        self.nodes.retain(|n| n.t == newest || connected.contains(n));
    }

    /// Removes every frame of timestep `t` and all incident edges.
    pub fn remove_timestep(&mut self, t: usize) -> Result<(), GraphError> {
        let pos = self.ordinal(t).ok_or(GraphError::UnknownTimestep(t))?;
        self.timeline.remove(pos);
        self.nodes.retain(|n| n.t != t);
        self.edges.retain(|e| e.from.t != t && e.to.t != t);
        Ok(())
    }

    /// Edge list, one `t_i c_i t_j c_j kind` line per edge in sorted order.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for e in &self.edges {
            out.push_str(&e.dump_line());
            out.push('\n');
        }
        out
    }

    /// All ordered pairs of distinct present frames: the dense baseline the
    /// rule-based edges are compared against.
    pub fn exhaustive_edges(&self) -> BTreeSet<Edge> {
        let mut out = BTreeSet::new();
        for &a in &self.nodes {
            for &b in &self.nodes {
                if a != b {
                    out.insert(Edge::new(a, b));
                }
            }
        }
        out
    }
}

pub fn parse_dump(text: &str) -> Result<Vec<Edge>, GraphError> {
    text.lines().filter(|l| !l.trim().is_empty()).map(Edge::parse_line).collect()
}

/// Frustum volume sampling for the overlap-driven edge selector.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrustumConfig {
    pub near: f64,
    pub far: f64,
    /// Voxel edge length in world units.
    pub voxel: f64,
}

impl Default for FrustumConfig {
    fn default() -> Self {
        Self { near: 0.5, far: 8.0, voxel: 0.2 }
    }
}

struct VoxelGrid {
    origin: Vector3<f64>,
    dims: [usize; 3],
    voxel: f64,
}

impl VoxelGrid {
    fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    fn center(&self, idx: usize) -> Vector3<f64> {
        let x = idx % self.dims[0];
        let y = (idx / self.dims[0]) % self.dims[1];
        let z = idx / (self.dims[0] * self.dims[1]);
        self.origin + Vector3::new(x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5) * self.voxel
    }
}

fn frustum_corners(intr: &Intrinsics, cam_to_world: &Pose, cfg: &FrustumConfig) -> Vec<Vector3<f64>> {
    let (w, h) = (intr.width as f64 - 0.5, intr.height as f64 - 0.5);
    let mut out = Vec::with_capacity(8);
    for depth in [cfg.near, cfg.far] {
        for (u, v) in [(-0.5, -0.5), (w, -0.5), (-0.5, h), (w, h)] {
            let ray = unproject(intr, u, v, 1.0).xyz();
            out.push(cam_to_world.transform_point(&(ray * depth)));
        }
    }
    out
}

fn in_frustum(intr: &Intrinsics, world_to_cam: &Pose, cfg: &FrustumConfig, x: &Vector3<f64>) -> bool {
    let p = world_to_cam.transform_point(x);
    if p.z < cfg.near || p.z > cfg.far {
        return false;
    }
    let u = intr.fx * p.x / p.z + intr.cx;
    let v = intr.fy * p.y / p.z + intr.cy;
    inside_image(intr, [u, v])
}

/// World-space frustum occupancy of a set of frames on a shared voxel grid.
pub struct FrustumOccupancy {
    pub frames: Vec<FrameId>,
    #[cfg_attr(not(test), allow(dead_code))]
    grid: VoxelGrid,
    bits: Vec<Vec<u64>>,
}

impl FrustumOccupancy {
    pub fn build(rig: &Rig, poses: &BTreeMap<usize, Pose>, frames: &[FrameId], cfg: &FrustumConfig) -> Self {
        let cams: Vec<(Intrinsics, Pose)> = frames
            .iter()
            .map(|f| (rig.camera(f.c).intrinsics, poses[&f.t] * rig.camera(f.c).extrinsic))
            .collect();
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for (intr, pose) in &cams {
            for c in frustum_corners(intr, pose, cfg) {
                lo = lo.inf(&c);
                hi = hi.sup(&c);
            }
        }
        let dims = if cams.is_empty() {
            [0, 0, 0]
        } else {
            let span = (hi - lo) / cfg.voxel;
            [span.x.ceil().max(1.0) as usize, span.y.ceil().max(1.0) as usize, span.z.ceil().max(1.0) as usize]
        };
        let grid = VoxelGrid { origin: lo, dims, voxel: cfg.voxel };
        let words = grid.len().div_ceil(64);
        let bits = parallel::map_collect(&cams, |(intr, pose)| {
            let inv = pose.inverse();
            let mut b = vec![0u64; words];
            for idx in 0..grid.len() {
                if in_frustum(intr, &inv, cfg, &grid.center(idx)) {
                    b[idx / 64] |= 1 << (idx % 64);
                }
            }
            b
        });
        Self { frames: frames.to_vec(), grid, bits }
    }

    pub fn iou(&self, a: usize, b: usize) -> f64 {
        let (mut inter, mut union) = (0u64, 0u64);
        for (x, y) in self.bits[a].iter().zip(&self.bits[b]) {
            inter += (x & y).count_ones() as u64;
            union += (x | y).count_ones() as u64;
        }
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    pub fn volume(&self, a: usize) -> u64 {
        self.bits[a].iter().map(|x| x.count_ones() as u64).sum()
    }
}

/// Frame pairs from different timesteps of `window`, ranked by world-space
/// frustum IoU (descending, ties by `(t_i, c_i, t_j, c_j)`); the `n_edges`
/// best pairs with nonzero overlap are returned.
pub fn frustum_overlap_edges(
    rig: &Rig,
    poses: &BTreeMap<usize, Pose>,
    window: &[usize],
    n_edges: usize,
    cfg: &FrustumConfig,
) -> Vec<(Edge, f64)> {
    let frames: Vec<FrameId> = window.iter().flat_map(|&t| (0..rig.len()).map(move |c| FrameId::new(t, c))).collect();
    let occ = FrustumOccupancy::build(rig, poses, &frames, cfg);
    let mut pairs = Vec::new();
    for a in 0..frames.len() {
        for b in a + 1..frames.len() {
            if frames[a].t != frames[b].t {
                pairs.push((a, b));
            }
        }
    }
    let scores = parallel::map_collect(&pairs, |&(a, b)| occ.iou(a, b));
    let mut ranked: Vec<(Edge, f64)> = pairs
        .iter()
        .zip(scores)
        .filter(|(_, s)| *s > 0.0)
        .map(|(&(a, b), s)| (Edge::new(frames[a], frames[b]), s))
        .collect();
    ranked.sort_by(|x, y| y.1.total_cmp(&x.1).then_with(|| x.0.cmp(&y.0)));
    ranked.truncate(n_edges);
    ranked
}
