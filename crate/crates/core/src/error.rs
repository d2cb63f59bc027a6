use std::path::{Path, PathBuf};

use thiserror::Error;

/// Errors produced by the reconstruction library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A transducer sits (almost) on top of a grid node; the spherical
    /// spreading factor 1/|r' - r| is unbounded there.
    #[error("singular geometry: channel {channel} is {distance:.3e} m from the nearest grid node (guard {guard:.3e} m)")]
    SingularGeometry {
        channel: usize,
        distance: f64,
        guard: f64,
    },

    #[error("undefined result: {0}")]
    Undefined(String),

    #[error(
        "solver diverged at iteration {iteration}: update grew by a factor {growth:.3e} \
         (step size {step:.3e}); reduce the step size"
    )]
    Divergence {
        iteration: usize,
        growth: f64,
        step: f64,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed container: {0}")]
    Format(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Process exit status used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) | Error::Config(_) | Error::Json(_) => 2,
            Error::Divergence { .. } => 3,
            Error::Io { .. } | Error::Format(_) => 4,
            Error::SingularGeometry { .. } | Error::Undefined(_) => 5,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
