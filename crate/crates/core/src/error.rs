use thiserror::Error;

/// Errors produced by the planning library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty sample set")]
    EmptySamples,

    #[error("closed-loop matrix is not stable (spectral radius {0})")]
    Unstable(f64),

    #[error("eigenvalue computation did not converge")]
    NonConvergence,

    #[error("transport problem too large ({0} x {1} atoms); cluster first")]
    TooLarge(usize, usize),

    #[error("unknown anchor time {0}")]
    UnknownAnchor(usize),

    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),

    #[error("set must be a single convex primitive: {0}")]
    NonConvex(String),

    #[error("target probability {0} unreachable: {1}")]
    Unreachable(f64, String),

    #[error("covariance is not positive semidefinite")]
    NotPsd,

    #[error("corrupt file {path}: {reason}")]
    CorruptFile { path: String, reason: String },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("node {0} is not attached to the tree")]
    DetachedNode(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
