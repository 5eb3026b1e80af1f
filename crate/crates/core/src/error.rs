// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module in the crate.

use std::path::PathBuf;

/// Errors produced by vitprobe.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor or array shapes that do not fit together.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A weight container is missing a tensor or holds one with the wrong shape.
    #[error("failed to load weights: tensor `{tensor}`: {reason}")]
    Load { tensor: String, reason: String },

    /// A non-finite value appeared during a computation.
    #[error("non-finite value at {location}")]
    Numeric { location: String },

    /// Input bytes could not be decoded.
    #[error("format error: {0}")]
    Format(String),

    /// Dataset or cache contents are unusable.
    #[error("data error: {0}")]
    Data(String),

    /// A caller violated an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A metric that is undefined for the given inputs.
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// Every patch of every pair was excluded by the influence guard.
    #[error("degenerate patching cell (L={layer}, T={target}): no patch passed the guard")]
    DegeneratePair { layer: usize, target: usize },

    /// Invalid or missing configuration.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
