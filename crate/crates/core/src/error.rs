use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("triangle {triangle} is degenerate (area {area:e})")]
    DegenerateTriangle { triangle: usize, area: f64 },

    #[error("mesh has no triangles")]
    EmptyMesh,

    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid camera: {0}")]
    InvalidCamera(String),

    #[error("mismatched inputs: {0}")]
    MismatchedInputs(String),

    #[error("dimension mismatch: expected {expected:?}, got {actual:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("texture has not been finalized")]
    UnfinalizedTexture,

    #[error("no guidance for pose `{pose_id}`, camera `{camera_id}`, stage {stage}")]
    MissingGuidance {
        pose_id: String,
        camera_id: String,
        stage: String,
    },

    #[error("invalid guidance request: {0}")]
    InvalidRequest(String),

    #[error("mask is empty")]
    EmptyMask,

    #[error("fewer than two views observe any texel")]
    InsufficientViews,

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("malformed {kind} file {path}: {reason}")]
    Format {
        kind: &'static str,
        path: PathBuf,
        reason: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(kind: &'static str, path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            kind,
            path: path.into(),
            reason: reason.into(),
        }
    }
}
