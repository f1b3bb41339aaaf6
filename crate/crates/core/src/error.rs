use std::path::PathBuf;

use difct_tensor::TensorError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("projection of point {point:?} is degenerate in view {view} (homogeneous w = {w:e})")]
    DegenerateProjection { view: usize, point: [f64; 3], w: f64 },

    #[error("view index {index} out of range for {count} views")]
    ViewOutOfRange { index: usize, count: usize },

    #[error("point {point:?} lies outside the volume extent {extent:?}")]
    OutOfBounds { point: [f64; 3], extent: [f64; 3] },

    #[error("degenerate volume: {0}")]
    DegenerateVolume(String),

    #[error("numerical divergence at iteration {iteration}, view {view}")]
    NumericalDivergence { iteration: usize, view: usize },

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    DivergedTraining { epoch: usize, loss: f64 },

    #[error("format error in {path}: {detail}")]
    Format { path: String, detail: String },

    #[error("unsupported {kind} version in {path}: expected {expected}, found {found}")]
    UnsupportedVersion {
        kind: &'static str,
        path: String,
        expected: String,
        found: String,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by malformed or missing input data.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Self::Format { .. }
                | Self::UnsupportedVersion { .. }
                | Self::Io { .. }
                | Self::OutOfBounds { .. }
                | Self::DegenerateVolume(_)
                | Self::Tensor(TensorError::Format(_) | TensorError::UnsupportedVersion { .. } | TensorError::Io(_))
        )
    }

    /// True for failures of an iterative numerical procedure.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Self::NumericalDivergence { .. } | Self::DivergedTraining { .. } | Self::DegenerateProjection { .. }
        )
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
