use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("raster has no valid (non-nodata) cell")]
    AllNodata,
    #[error("rectangle does not intersect the image")]
    EmptyIntersection,
    #[error("malformed header in {path}: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },
    #[error("size mismatch: expected {expected} values, found {found}")]
    SizeMismatch { expected: usize, found: usize },
    #[error("point lies behind the camera")]
    BehindCamera,
    #[error("undistortion did not converge")]
    UndistortDiverged,
    #[error("pixel ({x:.1}, {y:.1}) lies outside the sensor margin")]
    OutsideSensor { x: f64, y: f64 },
    #[error("no image has a valid footprint on the DSM")]
    NoValidFootprint,
    #[error("image too small: {width}x{height} (need at least {min}x{min})")]
    ImageTooSmall { width: usize, height: usize, min: usize },
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(&'static str),
    #[error("RANSAC found no model (best inlier count {best}, need {needed})")]
    NoModelFound { best: usize, needed: usize },
    #[error("matching backend failed on tile pair {pair_id}: {message}")]
    BackendFailure { pair_id: String, message: String },
    #[error("no rotation hypothesis produced a model")]
    NoHypothesisSucceeded,
    #[error("too few correspondences with valid 3D points: {found} (need {needed})")]
    TooFewValid3D { found: usize, needed: usize },
    #[error("rays are nearly parallel")]
    RaysNearParallel,
    #[error("normal equations are singular (missing gauge constraint?)")]
    SingularNormalEquations,
    #[error("rasters do not overlap")]
    NoOverlap,
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error("invalid scene spec: {0}")]
    SpecInvalid(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("unknown image id {0}")]
    UnknownImage(String),
    #[error("unknown camera id {0}")]
    UnknownCamera(String),
    #[error("parse error in {path}: {reason}")]
    Parse { path: PathBuf, reason: String },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("JSON error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json { path: path.into(), source }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Parse { path: path.into(), reason: reason.into() }
    }
}
