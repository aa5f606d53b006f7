use thiserror::Error;

use crate::oracle::NPlayerSolution;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model parameter `{field}`: {reason}")]
    InvalidParameter { field: &'static str, reason: String },

    #[error("t = {t} lies outside [0, {horizon}]")]
    Domain { t: f64, horizon: f64 },

    #[error("Newton solve for the optimal control did not converge (p = {p}, residual = {residual:e})")]
    NonConvergence { p: f64, residual: f64 },

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("backward pass requested on an empty tape")]
    EmptyTape,

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("the closed-form oracle requires a quadratic cost")]
    WrongCostKind,

    #[error("node index {k} out of range 0..={steps}")]
    NodeOutOfRange { k: usize, steps: usize },

    #[error("dual ascent stopped after {iterations} iterations with balance residual {residual:e}")]
    MaxIterations {
        iterations: usize,
        residual: f64,
        best: Box<NPlayerSolution>,
    },

    #[error("malformed trajectory batch: {0}")]
    Batch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
