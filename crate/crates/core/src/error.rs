use thiserror::Error;

/// Errors raised anywhere in the identification toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to load dataset: {0}")]
    Load(String),

    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),

    #[error("invalid split: {0}")]
    InvalidSplit(String),

    #[error("invalid quadrature rule: {0}")]
    InvalidRule(String),

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("invalid atom or label `{0}`")]
    InvalidAtom(String),

    #[error("unresolved parameter slot `{0}`")]
    UnresolvedParameter(String),

    #[error("no rows retained for window [{lower}, {upper}]: the window reaches past the available data")]
    EmptyRows { lower: f64, upper: f64 },

    #[error("incompatible row masks: the intersection is empty")]
    DisjointMasks,

    #[error("invalid regression problem: {0}")]
    InvalidProblem(String),

    #[error("equation {column}: {source}")]
    Column {
        column: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("missing derivative data for DIDE component {0}")]
    MissingDerivatives(usize),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("solver error: {0}")]
    Solver(String),

    #[error("unknown benchmark `{0}` (valid: logistic_re, ricker_simple, ricker_advanced, daphnia)")]
    UnknownBenchmark(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("failed to parse model file: {0}")]
    ModelFile(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
