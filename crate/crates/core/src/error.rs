use thiserror::Error;

/// Errors raised by the bound computations, samplers and estimators.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model: {0}")]
    Model(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("sampling failed: {0}")]
    Sampling(String),

    #[error("moment of order {order} does not exist: {detail}")]
    Moment { order: f64, detail: String },

    #[error("function samples come from different batches ({left:016x} vs {right:016x})")]
    BatchMismatch { left: u64, right: u64 },

    #[error("span Gram matrix is singular (condition number {condition:.3e}{})", k.map(|k| format!(", sieve size {k}")).unwrap_or_default())]
    SingularSpan { condition: f64, k: Option<usize> },

    #[error("singular Fisher information: {0}")]
    SingularFim(String),

    #[error("parameter of interest is not identifiable: {0}")]
    NonIdentifiable(String),

    #[error("score evaluation failed at sample {index}: {detail}")]
    Score { index: usize, detail: String },

    #[error("invalid submodel: {0}")]
    Submodel(String),

    #[error("invalid sieve schedule: {0}")]
    Schedule(String),

    #[error("numerical integrity violation: {0}")]
    Integrity(String),

    #[error("estimator failed: {0}")]
    Estimator(String),

    #[error("no convergence after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("malformed input: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
