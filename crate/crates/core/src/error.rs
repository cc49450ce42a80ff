use thiserror::Error;

use crate::token::ConfigViolation;
use crate::trace::TraceError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("degenerate (zero-norm) vector")]
    DegenerateVector,

    #[error("softmax row has no unmasked entry")]
    EmptySupport,

    #[error("empty input")]
    EmptyInput,

    #[error("weight must be positive and finite, got {0}")]
    NonPositiveWeight(f64),

    #[error("reference frame already registered")]
    ReferenceAlreadyRegistered,

    #[error("non-monotone frame index: {got} does not follow {prev}")]
    NonMonotoneFrames { prev: i64, got: i64 },

    #[error("score vector misaligned: expected {expected} entries, got {got}")]
    IndexMisalignment { expected: usize, got: usize },

    #[error("point {point:?} lies outside the voxel grid at voxel size {voxel_size}")]
    VoxelOutOfRange { point: [f64; 3], voxel_size: f64 },

    #[error("voxel coordinate ({0}, {1}, {2}) outside the Morton range")]
    CoordOutOfRange(i64, i64, i64),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("invalid configuration: {}", join_violations(.0))]
    InvalidConfig(Vec<ConfigViolation>),

    #[error("outputs are not comparable: {0}")]
    ConfigMismatch(String),

    #[error("invariant violation: {0}")]
    InvariantViolation(String),

    #[error(transparent)]
    Trace(#[from] TraceError),
}

fn join_violations(v: &[ConfigViolation]) -> String {
    v.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}
