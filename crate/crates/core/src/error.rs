use std::io;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty tensor")]
    EmptyTensor,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("backward called before forward or on a foreign variable")]
    NoForward,

    #[error("shape not poolable: {0}")]
    NotPoolable(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parameter out of range: {0}")]
    OutOfRange(String),

    #[error("undefined distance: {0}")]
    UndefinedDistance(String),

    #[error("matrix is not symmetric (max asymmetry {0:.3e})")]
    Asymmetric(f64),

    #[error("conjugate gradients did not converge after {iterations} iterations (residual {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("incongruent parameter sets: {0}")]
    Incongruent(String),

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// Process exit code used by the command-line harness.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::OutOfRange(_) => 1,
            Error::Io(_) | Error::Data(_) | Error::Format(_) => 2,
            _ => 3,
        }
    }
}
