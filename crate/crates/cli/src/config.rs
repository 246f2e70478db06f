use std::path::Path;

use mcdba::covis::GraphParams;
use mcdba::dba::DbaConfig;
use mcdba::pipeline::PipelineConfig;
use mcdba::simulator::{DepthSpec, NoiseSpec, RigSpec, TrajectorySpec};
use serde::{Deserialize, Serialize};

use crate::Failure;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Ground-truth depths beyond this are ignored.
    pub max_depth: f64,
    pub umeyama: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { max_depth: 80.0, umeyama: false }
    }
}

/// Every knob of a run. Missing sections and fields take their defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub rig: RigSpec,
    pub trajectory: TrajectorySpec,
    pub depth: DepthSpec,
    pub noise: NoiseSpec,
    pub graph: GraphParams,
    pub dba: DbaConfig,
    pub pipeline: PipelineConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>, seed: Option<u64>) -> Result<Self, Failure> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Failure::runtime(format!("{}: {e}", p.display())))?;
                toml::from_str(&text).map_err(|e| Failure::validation(format!("{}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.noise.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), Failure> {
        let v = |r: Result<(), String>| r.map_err(Failure::validation);
        v(self.rig.validate().map_err(|e| e.to_string()))?;
        v(self.trajectory.validate().map_err(|e| e.to_string()))?;
        v(self.depth.validate().map_err(|e| e.to_string()))?;
        v(self.noise.validate().map_err(|e| e.to_string()))?;
        v(self.graph.validate().map_err(|e| e.to_string()))?;
        v(self.dba.validate().map_err(|e| e.to_string()))?;
        v(self.pipeline.validate().map_err(|e| e.to_string()))?;
        if !(self.eval.max_depth > 0.0) {
            return Err(Failure::validation("eval.max_depth must be positive"));
        }
        Ok(())
    }
}
