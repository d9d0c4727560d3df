use std::path::PathBuf;

use thiserror::Error;

use crate::model::ParamSet;

pub type Result<T> = std::result::Result<T, Error>;

/// Unified error type for the whole toolkit.
///
/// Pipeline stages wrap lower-level errors in [`Error::Stage`] so CLI
/// diagnostics always name the stage that failed.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to read {path}: {detail}")]
    FileFormat { path: PathBuf, detail: String },

    /// A required tensor is missing from an asset container.
    /// The message names the logical field, e.g. "blendweights absent".
    #[error("{field} absent")]
    MissingTensor { field: &'static str },

    /// An asset tensor exists but violates a structural invariant.
    #[error("invalid model field `{field}`: {detail}")]
    ModelFormat { field: &'static str, detail: String },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Keypoint Jacobian too close to singular to invert (|det| <= 1e-8).
    #[error("singular jacobian for keypoint {index} (|det| = {det:.3e})")]
    SingularJacobian { index: usize, det: f64 },

    #[error("transform is not invertible (|det| = {det:.3e})")]
    SingularTransform { det: f64 },

    /// Motion-mask stack whose channels do not sum to 1 at some pixel.
    #[error("mask stack does not sum to 1 at pixel ({row}, {col}): sum = {sum}")]
    MaskSum { row: usize, col: usize, sum: f64 },

    #[error("occlusion map value {value} at ({row}, {col}) outside [0, 1]")]
    OcclusionRange { row: usize, col: usize, value: f64 },

    /// Optimizer hit a non-finite loss; carries the last finite iterate.
    #[error("fit diverged after {iterations} iterations (last finite loss {last_loss})")]
    FitDiverged {
        iterations: usize,
        last_loss: f64,
        last_params: Box<ParamSet>,
    },

    #[error("empty driving sequence")]
    EmptySequence,

    #[error("stage {stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn file(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::FileFormat {
            path: path.into(),
            detail: detail.into(),
        }
    }

    pub fn dim(detail: impl Into<String>) -> Self {
        Error::DimensionMismatch(detail.into())
    }

    pub fn arg(detail: impl Into<String>) -> Self {
        Error::InvalidArgument(detail.into())
    }

    /// Attach a pipeline stage name, preserving an existing tag if present.
    pub fn at_stage(self, stage: &'static str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            other => Error::Stage {
                stage,
                source: Box::new(other),
            },
        }
    }

    /// The innermost stage tag, if any.
    pub fn stage(&self) -> Option<&'static str> {
        match self {
            Error::Stage { stage, .. } => Some(stage),
            _ => None,
        }
    }
}

/// Run a fallible pipeline step under a stage label.
pub fn stage<T>(name: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    f().map_err(|e| e.at_stage(name))
}
