use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {msg}")]
    Parse { line: u64, msg: String },

    #[error("duplicate observation for unit `{unit}` at time `{time}`")]
    DuplicateKey { unit: String, time: String },

    #[error("invalid panel: {0}")]
    InvalidPanel(String),

    #[error("unsupported missing pattern: {0}")]
    UnsupportedPattern(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },

    #[error("input contains non-finite values")]
    NonFinite,

    #[error("rank collapse: sigma_{rank} = {sigma_r:e} relative to sigma_1 = {sigma_1:e}")]
    RankCollapse {
        rank: usize,
        sigma_r: f64,
        sigma_1: f64,
    },

    #[error("singular gram matrix (condition number {0:e})")]
    SingularGram(f64),

    #[error("decomposition failed to converge: {0}")]
    Decomposition(String),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
