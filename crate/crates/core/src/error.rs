use std::path::PathBuf;

use thiserror::Error;

/// Everything that can go wrong between reading a scan and rendering a report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read {path}: {reason}")]
    UnreadableFile { path: PathBuf, reason: String },

    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("label values outside {{0, 1}} in {path} (found {value})")]
    NonBinaryLabels { path: PathBuf, value: f32 },

    #[error("volume contains NaN or infinite values")]
    NonFiniteData,

    #[error("need at least {needed} cases, got {got}")]
    TooFewCases { needed: usize, got: usize },

    #[error("invalid manifest: {0}")]
    InvalidManifest(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate phantom grid: {0}")]
    DegenerateGrid(String),

    #[error("manifest has no training cases with masks")]
    NoTrainingCases,

    #[error("training masks contain no foreground voxels")]
    NoForegroundVoxels,

    #[error("BudgetInfeasible: minimal plan needs {needed} bytes, budget allows {available}")]
    BudgetInfeasible { needed: u64, available: u64 },

    #[error("incompatible shape: {0}")]
    ShapeIncompatible(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("empty surface: {0}")]
    EmptySurface(&'static str),

    #[error("missing prediction for case {case_id}")]
    MissingPrediction { case_id: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Variant name, printed by the command line tool.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::UnreadableFile { .. } => "UnreadableFile",
            Error::Io { .. } => "Io",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::NonBinaryLabels { .. } => "NonBinaryLabels",
            Error::NonFiniteData => "NonFiniteData",
            Error::TooFewCases { .. } => "TooFewCases",
            Error::InvalidManifest(_) => "InvalidManifest",
            Error::InvalidArgument(_) => "InvalidArgument",
            Error::DegenerateGrid(_) => "DegenerateGrid",
            Error::NoTrainingCases => "NoTrainingCases",
            Error::NoForegroundVoxels => "NoForegroundVoxels",
            Error::BudgetInfeasible { .. } => "BudgetInfeasible",
            Error::ShapeIncompatible(_) => "ShapeIncompatible",
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::NonFiniteLoss { .. } => "NonFiniteLoss",
            Error::EmptySurface(_) => "EmptySurface",
            Error::MissingPrediction { .. } => "MissingPrediction",
            Error::Checkpoint(_) => "Checkpoint",
            Error::Json { .. } => "Json",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
