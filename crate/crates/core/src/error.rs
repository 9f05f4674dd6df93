//! Crate-wide error type. Variants carry enough context to tell an input
//! problem (bad file, bad argument) from a numeric or internal failure.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty point set")]
    EmptyPointSet,

    #[error("underdetermined plane: need at least 3 points, got {0}")]
    UnderdeterminedPlane(usize),

    #[error("no consensus plane: best inlier fraction {best:.3} below required {required:.3}")]
    NoConsensusPlane { best: f64, required: f64 },

    #[error("patch out of bounds: top-left ({x}, {y}) with size {size} exceeds {width}x{height}")]
    PatchOutOfBounds { x: u32, y: u32, size: u32, width: u32, height: u32 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("empty evaluation set: no rays left after class filtering")]
    EmptyEvaluationSet,

    #[error("no evaluable patches: no grid cell has enough points in both clouds")]
    NoEvaluablePatches,

    #[error("unsupported manifest version {found} (supported: {supported})")]
    UnsupportedManifestVersion { found: u32, supported: u32 },

    #[error("unknown preset '{0}' (available: flat-road, slanted-road, curb)")]
    UnknownPreset(String),

    #[error("dataset file missing: {0}")]
    MissingFile(PathBuf),

    #[error("invalid data in {path}: {reason}")]
    InvalidData { path: PathBuf, reason: String },

    #[error("checkpoint is not a voxel field file: {0}")]
    BadCheckpoint(String),

    #[error("non-finite loss at step {step} (epoch {epoch}): {detail}")]
    NonFiniteLoss { step: u64, epoch: usize, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error in {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Error {
        Error::Io { path: path.into(), source }
    }

    /// True when the error stems from user input (files, arguments) rather
    /// than an internal failure. The CLI maps this to its usage exit code.
    pub fn is_input_error(&self) -> bool {
        !matches!(self, Error::NonFiniteLoss { .. })
    }
}
