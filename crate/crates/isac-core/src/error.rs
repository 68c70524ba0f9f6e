//! Crate-wide error type.

use std::path::PathBuf;

/// Errors produced by the simulator core.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An argument violated an operation's documented preconditions
    /// (dimension mismatch, non-positive power, empty input, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A decomposition or precoder construction hit a rank deficiency that
    /// the requested shape cannot survive.
    #[error("rank deficiency: {0}")]
    RankDeficient(String),

    /// An estimator could not produce a value from the given observations.
    #[error("estimation failure: {0}")]
    EstimationFailure(String),

    /// A scenario configuration failed validation or could not be parsed.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Filesystem failure while loading a config or exporting results.
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Attach a path to an I/O error.
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
