use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("matrix is not positive definite (pivot {pivot} = {value:e}); {hint}")]
    NotPositiveDefinite {
        pivot: usize,
        value: f64,
        hint: String,
    },

    #[error("power iteration did not converge after {iterations} iterations (best estimate {estimate})")]
    NoConvergence { iterations: usize, estimate: f64 },

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),

    #[error("checksum mismatch for {}: manifest says {expected:016x}, blob hashes to {actual:016x}", path.display())]
    ChecksumMismatch {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("config hash mismatch: file carries {found:016x}, expected {expected:016x}")]
    ConfigHashMismatch { expected: u64, found: u64 },

    #[error("malformed file {}: {reason}", path.display())]
    Format { path: PathBuf, reason: String },

    #[error("infeasible budget: {message}")]
    Infeasible { message: String, nearest: Vec<String> },

    #[error("missing characterization: {0}")]
    MissingCharacterization(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures of the numerical machinery rather than of the inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_)
                | Error::NotPositiveDefinite { .. }
                | Error::NoConvergence { .. }
                | Error::Divergence(_)
        )
    }
}
