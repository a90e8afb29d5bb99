use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument fell outside the domain of the operation.
    #[error("{what} = {value} is outside the valid domain {domain}")]
    Domain {
        what: &'static str,
        value: f64,
        domain: &'static str,
    },

    /// dσ/dτ diverges at this time because dα/dτ at zero is nonzero.
    #[error("dsigma/dtau diverges at tau = {tau} (dalpha/dtau at 0 = {dalpha0})")]
    Singular { tau: f64, dalpha0: f64 },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("invalid configuration: {0}")]
    InvalidSpec(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("non-finite state at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },

    #[error("training diverged at step {step}: loss {loss} stayed above 10x the initial loss {initial}")]
    Diverged { step: usize, loss: f64, initial: f64 },

    #[error("bound violated: actual error {actual} exceeds bound {bound}")]
    BoundViolated { actual: f64, bound: f64 },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
