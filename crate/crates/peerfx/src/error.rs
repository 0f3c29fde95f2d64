use thiserror::Error;

use crate::estimators::Estimate;

/// Errors produced by the estimation library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("singular block: {0}")]
    SingularBlock(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("parse error (record {line}): {msg}")]
    Parse { line: usize, msg: String },

    #[error("group '{0}' has a single member; every group needs at least 2")]
    SingletonGroup(String),

    #[error("category error: {0}")]
    Category(String),

    #[error("collinear regressors: condition number {cond:.3e} exceeds {limit:.1e}{detail}")]
    Collinearity {
        cond: f64,
        limit: f64,
        detail: String,
    },

    #[error("not identified: {0}")]
    Identification(String),

    #[error("no within-group variation left in the regressors")]
    WithinCollinearity,

    #[error("optimizer did not converge after {starts} start(s); best criterion {best_q:.6}")]
    NonConvergence {
        starts: usize,
        best_q: f64,
        best: Box<Estimate>,
    },

    #[error("weak identification: {0}")]
    WeakIdentification(String),

    #[error("no solution in (-1, 1): {0}")]
    OutOfRange(String),

    #[error("degenerate test: {0}")]
    DegenerateTest(String),

    #[error("information matrix is singular or not positive definite")]
    SingularInformation,

    #[error("sandwich variance has a non-positive diagonal entry at index {index} ({value:.3e}); estimated error moments are inconsistent")]
    SandwichDiagonal { index: usize, value: f64 },

    #[error("invalid design: {0}")]
    Design(String),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
