//! Error type shared across the crate.

use std::path::PathBuf;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong in the library.
///
/// Variants are grouped by the phase they occur in so the CLI can map them to
/// stable exit codes: configuration/validation problems, data-format problems,
/// numeric-contract violations, and I/O.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A configuration value is out of range or inconsistent.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A data file failed to parse or validate. Carries the file and
    /// 1-based line number so the offending record can be found.
    #[error("{path}:{line}: {message}")]
    DataFormat {
        path: String,
        line: usize,
        message: String,
    },

    /// An operation received arguments that violate its preconditions.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Tensor shapes do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An operation that needs at least one element got an empty collection.
    #[error("empty input: {0}")]
    EmptyInput(String),

    /// A metric is undefined on the given set (e.g. ROC-AUC with one class).
    #[error("metric undefined: {0}")]
    MetricUndefined(String),

    /// Confidence-model training needs at least one positive and one
    /// negative instance to form pairs.
    #[error("insufficient pair supply: no {side} instances in the dump")]
    InsufficientPairSupply { side: &'static str },

    /// A checkpoint file is malformed or describes a different model kind.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Underlying I/O failure, annotated with the path involved.
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Wrap an `io::Error` with the path it occurred on.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Build a [`Error::DataFormat`] for a specific line of a file.
    pub fn data_format(path: impl AsRef<std::path::Path>, line: usize, message: impl Into<String>) -> Self {
        Error::DataFormat {
            path: path.as_ref().display().to_string(),
            line,
            message: message.into(),
        }
    }
}
