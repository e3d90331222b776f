//! Light-curtain active perception on dynamic occupancy grids.
//!
//! A particle-based dynamic occupancy grid tracks occupancy and velocity;
//! curtain placement strategies pick one control point per camera ray; an
//! ε-greedy bandit chooses among the strategies using a self-supervised
//! reward. The [`pipeline`] module runs the whole loop against a simulated
//! world either synchronously or with three concurrent contexts.

pub mod bandit;
pub mod config;
pub mod error;
pub mod geometry;
pub mod grid;
pub mod metrics;
pub mod pipeline;
pub mod policies;
pub mod render;
pub mod sensing;
pub mod snapshot;
pub mod throughput;
pub mod worldsim;

pub use bandit::{self_supervised_reward, BanditParams, BanditState};
pub use config::{Mode, PolicyKind, RunConfig, SceneSpec};
pub use error::{Error, Result};
pub use geometry::{build_ray_table, los_mask, traverse_ray, CameraRay, CameraRayTable, CellMask, GridGeometry, Vec2};
pub use grid::{
    fit_gaussian, forecast, init_grid, measurement_update, motion_update, DynamicOccupancyGrid, Gaussian2, MotionModel, OccupancyLimits,
    Particle, SensorNoiseModel, UpdateStats,
};
pub use metrics::{binarize, eval_forecast, EvalReport};
pub use pipeline::{run, run_async, run_sync, RunSink, RunSummary, StepRecord};
pub use policies::{place_curtain, StrategyId};
pub use render::{render_grid, FrameImage};
pub use sensing::{extract_observation, image_curtain, random_curtain, Curtain, DetectionSet, Label, ObservationGrid};
pub use worldsim::{rasterize, GroundTruth, Scene, SceneObject, Shape, Trajectory};
