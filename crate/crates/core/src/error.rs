use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("scene generation failed: {0}")]
    SceneGeneration(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("position ({x:.3}, {y:.3}) lies outside the scene grid")]
    OutOfBounds { x: f64, y: f64 },

    #[error("cell ({i}, {j}) is not walkable")]
    NotWalkable { i: usize, j: usize },

    #[error("waypoint is {distance:.3} m away, beyond the step length {step_length:.3} m")]
    StepTooLong { distance: f64, step_length: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("unknown instance id {0}")]
    UnknownInstance(u32),

    #[error("no known-free cells to choose from")]
    NoFreeCells,

    #[error("exploration complete: no frontier cells remain")]
    ExplorationComplete,

    #[error("start cell ({i}, {j}) is not a navigation node")]
    StartIsolated { i: usize, j: usize },

    #[error("no path between ({0}, {1}) and ({2}, {3})")]
    NoPath(usize, usize, usize, usize),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("training diverged at epoch {epoch}: {message}")]
    Diverged { epoch: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
