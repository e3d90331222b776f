use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("point ({x:.4}, {y:.4}) lies outside the grid")]
    OutOfBounds { x: f64, y: f64 },

    #[error("grids do not share the same geometry or particle count")]
    GeometryMismatch,

    #[error("forecast horizon {horizon} s is not a positive integer multiple of dt = {dt} s")]
    InvalidHorizon { horizon: f64, dt: f64 },

    #[error("particle set is empty")]
    EmptyParticles,

    #[error("observation grid has no OCCUPIED or FREE cells")]
    NoObservedCells,

    #[error("line-of-sight mask is empty")]
    NoLosCells,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("malformed snapshot: {0}")]
    Snapshot(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
