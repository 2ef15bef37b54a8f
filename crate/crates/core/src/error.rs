use thiserror::Error;

/// Every failure mode surfaced by the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("map is not expanding: inf |T'| = {inf_derivative} <= 1")]
    NotExpanding { inf_derivative: f64 },

    #[error("invalid degree {0}: expected a positive integer")]
    InvalidDegree(i64),

    #[error("inverse branch solve did not reach tolerance at x = {x}")]
    BranchSolveFailure { x: f64 },

    #[error("linear part is not hyperbolic: |trace| = {trace_abs} <= 2")]
    NotHyperbolic { trace_abs: i64 },

    #[error("linear part has determinant {0}, expected +-1")]
    NotUnimodular(i64),

    #[error("cone field violated: {0}")]
    ConeViolation(String),

    #[error("no convergence: {0}")]
    NoConvergence(String),

    #[error("support size {size} exceeds exact solver cap {cap}")]
    ScaleExceeded { size: usize, cap: usize },

    #[error("transport problem infeasible: {0}")]
    Infeasible(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-positive reweighting factor {value} at ({x}, {y})")]
    NonPositiveWeight { value: f64, x: f64, y: f64 },

    #[error("no block carries at least 1/{blocks} of the mass under both measures")]
    NoOverlap { blocks: usize },

    #[error("no stable path of length <= {l0} connects the matched blocks")]
    HolonomyOutOfRange { l0: f64 },

    #[error("coupling series diverges: ratio (1 - tau) * lambda0^(-beta n0) = {ratio} >= 1")]
    DivergentSeries { ratio: f64 },

    #[error("insufficient data: {usable} usable entries, need at least {needed}")]
    InsufficientData { usable: usize, needed: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("negative weight {value} at line {line}")]
    NegativeWeight { line: usize, value: f64 },

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
