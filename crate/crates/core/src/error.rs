use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header {path}: {message}")]
    Header { path: PathBuf, message: String },

    #[error("payload of {path} has {actual} bytes, header dims require {expected}")]
    PayloadLength {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },

    #[error("expected a {expected} volume, found {found}")]
    KindMismatch {
        expected: &'static str,
        found: String,
    },

    #[error("non-finite dose at voxel {index}")]
    NonFiniteDose { index: usize },

    #[error("negative dose {value} at voxel {index}")]
    NegativeDose { index: usize, value: f64 },

    #[error("dimension mismatch: {left:?} vs {right:?}")]
    DimsMismatch {
        left: [usize; 3],
        right: [usize; 3],
    },

    #[error("unit scale mismatch: {left} vs {right}")]
    UnitMismatch { left: f64, right: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("too many ROIs: {count} exceeds the 32-bit word width")]
    TooManyRois { count: usize },

    #[error("duplicate ROI name {0:?}")]
    DuplicateRoi(String),

    #[error("unknown ROI {0:?}")]
    UnknownRoi(String),

    #[error("bit index {index} out of range 1..={count}")]
    BitOutOfRange { index: usize, count: usize },

    #[error("ROI {0:?} is empty")]
    EmptyRoi(String),

    #[error("dose list is empty")]
    EmptyDoses,

    #[error("template error: {0}")]
    Template(String),

    #[error("no prescription for ROI {0:?}")]
    MissingPrescription(String),

    #[error("no surrogate configuration for V-metric on {0:?}")]
    MissingSurrogate(String),

    #[error(
        "tolerance {eps} is infeasible for q_m = {q_m}: no finite alpha exists, \
         the smallest feasible tolerance is q_m/2 = {min_eps}"
    )]
    InfeasibleTolerance { eps: f64, q_m: f64, min_eps: f64 },

    #[error("rotation in the {axes} plane needs equal axis lengths, got {dims:?}")]
    NonConformingRotation { axes: &'static str, dims: [usize; 3] },

    #[error("phantom ground truth violates its own constraint: {0}")]
    PhantomInfeasible(String),

    #[error("optimization diverged at iteration {iteration}: L_total rose for {streak} consecutive steps")]
    Diverged { iteration: usize, streak: usize },

    #[error("benchmark outputs differ for {0}")]
    BenchMismatch(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
