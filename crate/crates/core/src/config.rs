//! Run configuration, loaded from JSON. Every field has a default, so `{}`
//! is a valid config.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bandit::BanditParams;
use crate::error::{Error, Result};
use crate::geometry::GridGeometry;
use crate::grid::{horizon_steps, MotionModel, SensorNoiseModel};
use crate::policies::StrategyId;
use crate::worldsim::{self, SceneObject};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Depth,
    Occ,
    Vel,
    Cmb,
    Random,
    Lidar,
    Mab,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 7] =
        [PolicyKind::Depth, PolicyKind::Occ, PolicyKind::Vel, PolicyKind::Cmb, PolicyKind::Random, PolicyKind::Lidar, PolicyKind::Mab];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Depth => "depth",
            PolicyKind::Occ => "occ",
            PolicyKind::Vel => "vel",
            PolicyKind::Cmb => "cmb",
            PolicyKind::Random => "random",
            PolicyKind::Lidar => "lidar",
            PolicyKind::Mab => "mab",
        }
    }

    /// The fixed strategy, for single-strategy policies.
    pub fn strategy(self) -> Option<StrategyId> {
        match self {
            PolicyKind::Depth => Some(StrategyId::DepthProb),
            PolicyKind::Occ => Some(StrategyId::OccEntropy),
            PolicyKind::Vel => Some(StrategyId::VelEntropy),
            PolicyKind::Cmb => Some(StrategyId::Combined),
            _ => None,
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("unknown policy `{s}` (expected depth, occ, vel, cmb, random, lidar or mab)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Sync,
    Async,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Sync => "sync",
            Mode::Async => "async",
        })
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "sync" => Ok(Mode::Sync),
            "async" => Ok(Mode::Async),
            _ => Err(format!("unknown mode `{s}` (expected sync or async)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SceneSpec {
    SimDefault,
    StaticWall,
    Empty,
    Custom(Vec<SceneObject>),
}

impl SceneSpec {
    pub fn objects(&self, geom: &GridGeometry) -> Vec<SceneObject> {
        match self {
            SceneSpec::SimDefault => worldsim::sim_default(geom),
            SceneSpec::StaticWall => worldsim::static_wall(geom),
            SceneSpec::Empty => Vec::new(),
            SceneSpec::Custom(objects) => objects.clone(),
        }
    }
}

/// Rates in Hz for the asynchronous contexts; 0 runs a context unpaced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AsyncConfig {
    pub imaging_hz: f64,
    pub filtering_hz: f64,
    pub placement_hz: f64,
    /// Extra time the placement context holds its pinned grid per cycle.
    pub placement_stall_ms: u64,
    /// Frames the imaging context may run ahead of the filter.
    pub queue_depth: usize,
}

impl Default for AsyncConfig {
    fn default() -> Self {
        Self { imaging_hz: 45.0, filtering_hz: 0.0, placement_hz: 0.0, placement_stall_ms: 0, queue_depth: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub geometry: GridGeometry,
    pub particles_per_cell: usize,
    /// Defaults derived from the geometry when absent.
    pub motion: Option<MotionModel>,
    pub sensor_noise: SensorNoiseModel,
    pub bandit: BanditParams,
    pub scene: SceneSpec,
    pub policy: PolicyKind,
    pub mode: Mode,
    pub steps: u64,
    pub seed: u64,
    /// Forecast horizon of the evaluation, seconds.
    pub eval_horizon: f64,
    /// Steps between evaluation ticks; 0 disables evaluation.
    pub eval_every: u64,
    /// Image one extra random curtain per step and fold it into the belief.
    pub random_fill: bool,
    /// Frames between LiDAR scans for the `lidar` policy.
    pub lidar_every: u64,
    /// Steps between grid snapshots handed to the run sink; 0 keeps only the
    /// final grid.
    pub snapshot_every: u64,
    /// Check grid invariants after every filter step.
    pub check_invariants: bool,
    #[serde(rename = "async")]
    pub async_opts: AsyncConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            geometry: GridGeometry::default(),
            particles_per_cell: 10,
            motion: None,
            sensor_noise: SensorNoiseModel::default(),
            bandit: BanditParams::default(),
            scene: SceneSpec::SimDefault,
            policy: PolicyKind::Mab,
            mode: Mode::Sync,
            steps: 600,
            seed: 0,
            eval_horizon: 0.5,
            eval_every: 10,
            random_fill: true,
            lidar_every: 4,
            snapshot_every: 0,
            check_invariants: false,
            async_opts: AsyncConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn motion_model(&self) -> MotionModel {
        self.motion.clone().unwrap_or_else(|| MotionModel::for_geometry(&self.geometry))
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        let motion = self.motion_model();
        motion.validate()?;
        self.sensor_noise.validate()?;
        self.bandit.validate()?;
        let bad = |m: &str| Err(Error::InvalidParameter(m.to_string()));
        if self.particles_per_cell == 0 {
            return bad("particles_per_cell must be at least 1");
        }
        if self.steps == 0 {
            return bad("steps must be at least 1");
        }
        if self.lidar_every == 0 {
            return bad("lidar_every must be at least 1");
        }
        if self.eval_every > 0 {
            horizon_steps(self.eval_horizon, motion.dt)?;
        }
        let a = &self.async_opts;
        if !(a.imaging_hz >= 0.0 && a.filtering_hz >= 0.0 && a.placement_hz >= 0.0) {
            return bad("async rates must be non-negative");
        }
        if a.queue_depth == 0 {
            return bad("async queue_depth must be at least 1");
        }
        for o in self.scene.objects(&self.geometry) {
            o.validate()?;
        }
        Ok(())
    }
}
