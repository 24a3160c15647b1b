use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AmpError {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("dimension mismatch: expected {expected}, got {got} ({what})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid correlation {value} at ({i}, {j}): must lie in [-1, 1]")]
    InvalidCorrelation { i: usize, j: usize, value: f64 },

    #[error("correlation profile is not symmetric at ({i}, {j}): {a} != {b}")]
    AsymmetricCorrelation { i: usize, j: usize, a: f64, b: f64 },

    #[error("unattainable correlation {tau} for the {family} entry family")]
    UnattainableCorrelation { tau: f64, family: &'static str },

    #[error("infeasible degree: {0}")]
    InfeasibleDegree(String),

    #[error("invalid variance profile: {0}")]
    InvalidProfile(String),

    #[error("invalid covariance: minimum eigenvalue {min_eigenvalue} is below tolerance")]
    InvalidCovariance { min_eigenvalue: f64 },

    #[error("unknown activation family `{0}`")]
    UnknownActivation(String),

    #[error("invalid activation: {0}")]
    InvalidActivation(String),

    #[error("invalid quadrature: {0}")]
    InvalidQuadrature(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("AMP diverged at step {step}: max |x| = {max_abs}")]
    Divergence { step: usize, max_abs: f64 },

    #[error("missing density evolution state: {0}")]
    MissingDensityEvolution(String),

    #[error("arity mismatch: test function needs {needed} iterates, {available} available")]
    ArityMismatch { needed: usize, available: usize },

    #[error("inconsistent inputs: {0}")]
    Inconsistent(String),

    #[error("tree enumeration budget exceeded: {0}")]
    BudgetExceeded(String),

    #[error("non-zero diagonal entry W[{index}][{index}] = {value}")]
    NonZeroDiagonal { index: usize, value: f64 },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for AmpError {
    fn from(e: std::io::Error) -> Self {
        AmpError::Io(e.to_string())
    }
}

impl From<csv::Error> for AmpError {
    fn from(e: csv::Error) -> Self {
        AmpError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, AmpError>;
