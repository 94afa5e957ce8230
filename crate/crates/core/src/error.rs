use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite entry in {0}")]
    NonFinite(&'static str),

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("{context} requires a square matrix, got {rows}x{cols}")]
    NotSquare {
        context: &'static str,
        rows: usize,
        cols: usize,
    },

    #[error("matrix is singular: pivot {pivot:e} below tolerance {tolerance:e}")]
    Singular { pivot: f64, tolerance: f64 },

    #[error("Lyapunov operator is not stable: eigenvalue real part {max_real_part} >= 0")]
    Unstable { max_real_part: f64 },

    #[error("invalid topology: {0}")]
    Topology(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("protocol `{0}` has no finite support; exact expectations need an i.i.d. finite protocol")]
    MissingSupport(String),

    #[error("contraction violated: {what} = {value} (must be < 1)")]
    Contraction { what: &'static str, value: f64 },

    #[error("Jacobian of the mean field is not Hurwitz (largest real part {max_real_part})")]
    NotHurwitz { max_real_part: f64 },

    #[error("step size condition violated for a = 1: gamma_star = {gamma_star} must exceed 1/(2L) = {bound}")]
    StepSize { gamma_star: f64, bound: f64 },

    #[error("protocol `{0}` is not doubly stochastic for every draw")]
    NotDoublyStochastic(String),

    #[error("weighted variant needs strictly positive weights, got v[{index}] = {value}")]
    NonPositiveWeight { index: usize, value: f64 },

    #[error("iterate diverged at n = {n}: |theta| = {norm:e}")]
    Divergence { n: u64, norm: f64 },

    #[error("run {run}: {source}")]
    Run {
        run: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}
