use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("data length {actual} does not match geometry (expected {expected})")]
    DataLength { expected: usize, actual: usize },

    #[error("non-finite value at index {0}")]
    NonFinite(usize),

    #[error("label {0} is not in the label table")]
    UnknownLabel(u32),

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("unsupported datatype: {0}")]
    UnsupportedDatatype(String),

    #[error("oblique orientation is not supported: {0}")]
    ObliqueOrientation(String),

    #[error("non-integral label value {value} at voxel {index}")]
    NonIntegralLabel { index: usize, value: f64 },

    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),

    #[error("invalid scale factor: {0}")]
    InvalidScaleFactor(String),

    #[error("invalid augmentation policy: {0}")]
    InvalidPolicy(String),

    #[error("degenerate resampling target: {0}")]
    DegenerateTarget(String),

    #[error("structure does not fit inside the grid: {0}")]
    StructureExceedsGrid(String),

    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    #[error("insufficient subjects: need {needed}, have {available}")]
    InsufficientSubjects { needed: usize, available: usize },

    #[error("invalid resolution pair: {0}")]
    InvalidResolutionPair(String),

    #[error("invalid resolution list: {0}")]
    InvalidResolutions(String),

    #[error("label map has no foreground voxels")]
    EmptyForeground,

    #[error("reference structure for label {0} is empty")]
    EmptyReference(u32),

    #[error("no records for group {0}")]
    EmptyGroup(String),

    #[error("ROC analysis needs both classes present")]
    SingleClass,

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("missing predictions for subjects: {}", .0.join(", "))]
    MissingPredictions(Vec<String>),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by the filesystem rather than by the inputs'
    /// content. The CLI maps these to exit code 2.
    pub fn is_io(&self) -> bool {
        match self {
            Error::Io { .. } | Error::MissingPredictions(_) => true,
            Error::Csv(e) => matches!(e.kind(), csv::ErrorKind::Io(_)),
            Error::Json(e) => e.is_io(),
            _ => false,
        }
    }
}
