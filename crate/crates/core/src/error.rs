use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = UadError> = std::result::Result<T, E>;

/// Errors surfaced by the library and mapped to CLI exit codes.
#[derive(Debug, Error)]
pub enum UadError {
    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot read NIfTI file {path}: {message}")]
    Nifti { path: PathBuf, message: String },

    #[error("{path}: expected a single-channel 3D volume, found dims {dims:?}")]
    NotVolumetric { path: PathBuf, dims: Vec<usize> },

    #[error("{context}: non-finite voxel at (x={x}, y={y}, z={z})")]
    NonFiniteVoxel { context: String, x: usize, y: usize, z: usize },

    #[error("mask {context} holds label ids absent from label_names: {ids:?}")]
    UnknownLabels { context: String, ids: Vec<u16> },

    #[error("shape mismatch in {context}: expected {expected:?}, found {found:?}")]
    ShapeMismatch { context: String, expected: Vec<usize>, found: Vec<usize> },

    #[error("invalid {what}: {reason}")]
    Invalid { what: String, reason: String },

    #[error("config key `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("missing input {path}: {hint}")]
    MissingInput { path: PathBuf, hint: String },

    #[error("non-finite value in {stage}: {detail}")]
    NonFinite { stage: String, detail: String },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("cannot parse {path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl UadError {
    pub fn invalid(what: impl Into<String>, reason: impl Into<String>) -> Self {
        Self::Invalid { what: what.into(), reason: reason.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    pub fn shape(context: impl Into<String>, expected: &[usize], found: &[usize]) -> Self {
        Self::ShapeMismatch { context: context.into(), expected: expected.to_vec(), found: found.to_vec() }
    }

    pub fn non_finite(stage: impl Into<String>, detail: impl Into<String>) -> Self {
        Self::NonFinite { stage: stage.into(), detail: detail.into() }
    }

    /// Input or configuration problems, as opposed to failures while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Self::NotVolumetric { .. }
                | Self::NonFiniteVoxel { .. }
                | Self::UnknownLabels { .. }
                | Self::ShapeMismatch { .. }
                | Self::Invalid { .. }
                | Self::Config { .. }
                | Self::MissingInput { .. }
                | Self::Parse { .. }
        )
    }
}
