use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] io::Error),

    #[error("bad magic header (expected MF3D\\x01)")]
    BadMagic,

    #[error("truncated payload in field `{field}`")]
    TruncatedPayload { field: String },

    #[error("unknown record tag {0:?}")]
    UnknownTag([u8; 4]),

    #[error("invariant violated in `{field}`: {reason}")]
    InvariantViolation { field: String, reason: String },

    #[error("dimension mismatch in `{field}`: expected {expected}, got {got}")]
    DimensionMismatch {
        field: String,
        expected: usize,
        got: usize,
    },

    #[error("nonpositive depth d_z = {0}")]
    NonpositiveDepth(f64),

    #[error("point {index} is behind the camera (z = {z})")]
    BehindCamera { index: usize, z: f64 },

    #[error("normal is not unit length (|n| = {0})")]
    NonUnitNormal(f64),

    #[error("ground-truth center list is empty")]
    EmptyGroundTruth,

    #[error("probability {value} at cell {cell} is outside [0, 1]")]
    ProbabilityOutOfRange { value: f64, cell: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("skin region is empty")]
    EmptyRegion,

    #[error("feature extractor failed: {0}")]
    Extractor(String),

    #[error("center ({x}, {y}) is outside the {w}x{h} frame")]
    OutOfFrame { x: f64, y: f64, w: u32, h: u32 },

    #[error("optimization diverged at iteration {iteration}")]
    Diverged { iteration: usize },

    #[error("no faces found")]
    NoFacesFound,

    #[error("face placement failed after {0} attempts")]
    PlacementFailure(usize),

    #[error("normalizer must be positive")]
    ZeroNorm,

    #[error("input is empty")]
    EmptyInput,

    #[error("render buffers do not match the mesh list: {0}")]
    BufferMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn invariant(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvariantViolation {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
