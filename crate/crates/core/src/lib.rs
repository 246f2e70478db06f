//! Multi-camera dense bundle adjustment.
//!
//! The crate covers the geometric half of a multi-camera depth and ego-motion
//! system: a co-visibility graph over `(timestep, camera)` frames, dense
//! correlation lookup, induced and rotation-compensated flow, and a
//! Gauss-Newton solver whose unknowns are per-timestep rig poses and
//! per-pixel inverse depths. A synthetic rig simulator and a ground-truth
//! flow oracle drive the solver end to end.

pub mod correlation;
pub mod covis;
pub mod dba;
pub mod flow;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod parallel;
pub mod pipeline;
pub mod simulator;

pub use covis::{CovisGraph, Edge, EdgeKind, FrameId, GraphParams};
pub use dba::{DbaConfig, DbaProblem, InverseDepthField};
pub use geometry::{Camera, HomoPoint, Intrinsics, Pose, Rig, Twist};
