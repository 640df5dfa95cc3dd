//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SentinelError {
    /// Operand shapes are incompatible. Carries a human-readable shape report.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A matrix that must be symmetric is not (within tolerance).
    #[error("matrix is not symmetric: max |a_ij - a_ji| = {max_asym:.3e}")]
    NotSymmetric { max_asym: f64 },

    /// Backward pass requested from a non-scalar node.
    #[error("loss node must be 1x1, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A file does not start with the expected magic bytes.
    #[error("bad magic in {path}: expected {expected}")]
    BadMagic {
        path: String,
        expected: &'static str,
    },

    /// A file ended before the declared contents were read.
    #[error("truncated file: {path}")]
    Truncated { path: String },

    /// A file carries an unsupported format version.
    #[error("unsupported version {found} in {path} (expected {expected})")]
    VersionMismatch {
        path: String,
        found: u16,
        expected: u16,
    },

    #[error("config error: {0}")]
    Config(String),

    /// A pipeline stage needs an artifact that an earlier stage has not produced.
    #[error("missing artifact for stage `{stage}`: {path} (run stage `{produced_by}` first)")]
    MissingArtifact {
        stage: String,
        path: String,
        produced_by: String,
    },

    /// Training produced a non-finite loss.
    #[error("numeric divergence: {0}")]
    Diverged(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl SentinelError {
    /// Process exit code for the CLI: 2 config, 3 missing artifact, 4 divergence, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            SentinelError::Config(_) | SentinelError::InvalidArgument(_) => 2,
            SentinelError::MissingArtifact { .. } => 3,
            SentinelError::Diverged(_) => 4,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, SentinelError>;
