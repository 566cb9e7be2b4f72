use thiserror::Error;

/// Errors raised by the library.
///
/// The split between input problems and numerical failures matters to
/// callers: the command-line front end maps them to different exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid kernel: {0}")]
    InvalidKernel(String),

    #[error("coincident points: {0}")]
    CoincidentPoints(String),

    #[error("no admissible pairs: {0}")]
    NoAdmissiblePairs(String),

    #[error("factorization failed after jitter escalation (final jitter {jitter:e})")]
    Factorization { jitter: f64 },

    #[error("rank-deficient frame at grid index {index} (rank {rank} < {cols})")]
    RankDeficient { index: usize, rank: usize, cols: usize },

    #[error("degenerate data: {0}")]
    Degenerate(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed batch file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures that come from the numerics rather than from the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Factorization { .. } | Error::RankDeficient { .. } | Error::Degenerate(_) | Error::Numerical(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
