use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid ensemble: {0}")]
    InvalidEnsemble(String),

    #[error("matrix is singular (|det| = {det:e})")]
    Singular { det: f64 },

    #[error("degenerate projective action: |gx| = {norm:e}")]
    DegenerateAction { norm: f64 },

    #[error("unsupported grid: {0}")]
    UnsupportedGrid(String),

    #[error("power iteration did not converge after {iterations} iterations (last gap estimate {gap:.6})")]
    NonConvergence { iterations: usize, gap: f64 },

    #[error("parameter out of domain: {0}")]
    OutOfDomain(String),

    #[error("degenerate variance: Λ''(s) = {0:e}")]
    DegenerateVariance(f64),

    #[error("newton iteration diverged: {0}")]
    NewtonDivergence(String),

    #[error("enumeration guard exceeded: {paths} paths > {limit}")]
    GuardExceeded { paths: f64, limit: f64 },

    #[error("log-weight overflow: {0:e}")]
    WeightOverflow(f64),

    #[error("quadrature failure: {0}")]
    Quadrature(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
