use thiserror::Error;

/// Errors produced across the registration toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("point cloud is empty")]
    EmptyCloud,

    #[error("invalid point cloud: {0}")]
    InvalidCloud(String),

    #[error("grid coordinate {value} does not fit in {depth} bits")]
    CoordinateOutOfRange { value: u64, depth: u32 },

    #[error("serialization depth {0} outside supported range 1..=21")]
    InvalidDepth(u32),

    #[error("need more than {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },

    #[error("SSM step size must be positive, got {0}")]
    NonPositiveDelta(f64),

    #[error("global convolution requires time-invariant SSM parameters")]
    SelectiveParamsNotAllowed,

    #[error("feature set is empty")]
    EmptyFeatures,

    #[error("need at least {needed} correspondences, got {got}")]
    TooFewCorrespondences { needed: usize, got: usize },

    #[error("no overlap between source and target")]
    NoOverlap,

    #[error("degenerate correspondence configuration: {0}")]
    DegenerateConfiguration(String),

    #[error("need at least {needed} weighted pairs, got {got}")]
    InsufficientPairs { needed: usize, got: usize },

    #[error("input set is empty")]
    EmptySet,

    #[error("no ground-truth pairs with positive overlap")]
    NoGroundTruthPairs,

    #[error("voxel sizes must be positive and strictly increasing")]
    NonAscendingVoxels,

    #[error("gradient requested for non-scalar output of shape {rows}x{cols}")]
    NonScalarOutput { rows: usize, cols: usize },

    #[error("training diverged at step {0} (non-finite loss)")]
    DivergedLoss(usize),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("unsupported PLY feature: {0}")]
    UnsupportedPlyFeature(String),

    #[error("cannot reach requested overlap {requested:.3} (closest achievable {achieved:.3})")]
    InfeasibleOverlap { requested: f64, achieved: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::ShapeMismatch {
        op,
        detail: detail.into(),
    }
}
