use thiserror::Error;

/// Errors raised by every module in the crate.
#[derive(Debug, Error)]
pub enum PcError {
    /// Operand dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// A matrix that must be symmetric positive-definite is not.
    #[error("domain error: {0}")]
    Domain(String),
    /// An argument is out of its admissible range.
    #[error("invalid argument: {0}")]
    Argument(String),
    /// An iterative procedure left the finite range.
    #[error("diverged at {location} (iteration {iteration})")]
    Divergence { location: String, iteration: usize },
    /// Linear solve on a singular system.
    #[error("numerical error: {0}")]
    Numerical(String),
    /// The operation is not defined for this configuration.
    #[error("unsupported configuration: {0}")]
    Unsupported(String),
    /// Operation invoked in the wrong order.
    #[error("invalid state: {0}")]
    State(String),
    /// Malformed binary input.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },
    /// Configuration rejected at parse time.
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = PcError> = std::result::Result<T, E>;

pub(crate) fn shape_err(what: impl Into<String>) -> PcError {
    PcError::Shape(what.into())
}

pub(crate) fn ensure_len(name: &str, got: usize, want: usize) -> Result<()> {
    if got == want {
        Ok(())
    } else {
        Err(shape_err(format!("{name}: expected length {want}, got {got}")))
    }
}
