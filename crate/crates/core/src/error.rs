use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate point: zero-length vector has no polar form")]
    DegeneratePoint,
    #[error("range must be positive, got {0}")]
    NonPositiveRange(f64),
    #[error("singular matrix")]
    Singular,
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("plane not found: inlier ratio {ratio:.3} below minimum {min:.3}")]
    PlaneNotFound { ratio: f64, min: f64 },
    #[error("no points in ROI")]
    NoPointsInRoi,
    #[error("insufficient edge points: {edge} edge has {count} boundary points")]
    InsufficientEdgePoints { edge: &'static str, count: usize },
    #[error("degenerate edges: {0}")]
    DegenerateEdges(String),
    #[error("distortion inversion failed to converge")]
    DistortionInversionFailed,
    #[error("degenerate corners: {0}")]
    DegenerateCorners(String),
    #[error("board lies behind the camera")]
    BehindCamera,
    #[error("degenerate normal matrix")]
    DegenerateNormalMatrix,
    #[error("need at least {need} poses, got {got}")]
    TooFewPoses { need: usize, got: usize },
    #[error("no pose set has a finite VOQ")]
    NoFiniteSets,
    #[error("aggregation collapsed: {0}")]
    AggregationCollapsed(String),
    #[error("all evaluation poses were excluded")]
    AllPosesExcluded,
    #[error("scene generation failed: {0}")]
    Generation(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid data in {path}: {msg}")]
    Parse { path: PathBuf, msg: String },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Config,
            Error::Parse { .. }
            | Error::Io { .. }
            | Error::NoPointsInRoi
            | Error::TooFewPoses { .. } => ErrorKind::Data,
            _ => ErrorKind::Numerical,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
