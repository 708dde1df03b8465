use thiserror::Error;

/// Errors raised by geometry queries, kinematics, solvers and scenario loading.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    /// A margin or norm slack left the open domain of the barrier.
    #[error("barrier argument {0} is outside (0, inf)")]
    BoundaryViolation(f64),
    /// The pair is in contact or overlapping, so no separating plane exists.
    #[error("bodies {0} and {1} are in contact or overlapping")]
    DegeneratePair(String, String),
    #[error("inner plane problem has no solution: {0}")]
    NoSolution(String),
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("initial configuration is in collision: {0} vs {1}")]
    InfeasibleStart(String, String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
