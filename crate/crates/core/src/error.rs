use thiserror::Error;

/// Failures reported by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Argument outside the domain of an evaluation routine.
    #[error("domain error: {0}")]
    Domain(String),

    /// A precondition of an operation was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid or inconsistent configuration, detected before solving.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("singular Jacobian (condition estimate {cond:.3e})")]
    Singular { cond: f64 },

    #[error("Newton diverged after {iterations} iterations (residual {residual:.3e})")]
    Divergence { iterations: usize, residual: f64 },

    #[error("Newton stopped after {iterations} iterations without converging (residual {residual:.3e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("seeding error: {0}")]
    Seed(String),

    #[error("integration failed at t = {t}: {msg}")]
    Integration { t: f64, msg: String },

    /// The requested Floquet multiplier is complex, negative or on the unit circle.
    #[error("not real hyperbolic: {0}")]
    NotHyperbolic(String),

    #[error("degenerate hyperbolicity: |lambda| = {0:.3e}")]
    Degenerate(f64),

    /// A connection solve left the chart (|sigma| > 1).
    #[error("escaped chart: {0}")]
    EscapedChart(String),

    #[error("connection solve drove the flight time negative (T = {0})")]
    NegativeTime(f64),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("artifact error: {0}")]
    Artifact(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True for failures that come from user input rather than numerics.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Contract(_) | Error::Json(_))
    }
}
