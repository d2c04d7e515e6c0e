use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("point has non-positive depth {depth} after transformation")]
    NonPositiveDepth { depth: f64 },
    #[error("empty input")]
    EmptyInput,
    #[error("degenerate minimal configuration: {0}")]
    DegenerateConfiguration(&'static str),
    #[error("iterative solver did not converge within {iterations} iterations")]
    DidNotConverge { iterations: usize },
    #[error("vertical line cannot be expressed as y = a*x + b")]
    VerticalLine,
    #[error("need at least {needed} correspondences, got {available}")]
    TooFewCorrespondences { needed: usize, available: usize },
    #[error("no valid hypothesis after {attempts} attempts")]
    AllDegenerate { attempts: usize },
    #[error("hypothesis pool has no valid entry")]
    AllInvalid,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("pool of {size} hypotheses exceeds the enumeration limit {limit}")]
    PoolTooLarge { size: usize, limit: usize },
    #[error("black-box function returned non-finite output")]
    NonFiniteOutput,
    #[error("training aborted: {degenerate} of {window} recent pools were all-degenerate")]
    AbortedRun { degenerate: usize, window: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
