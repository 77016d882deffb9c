use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid range: {0}")]
    InvalidRange(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-monotone timesteps: from {from} to {to}")]
    NonMonotoneTimestep { from: usize, to: i64 },

    #[error("signature cache does not match delivery sites: {0}")]
    CacheSiteMismatch(String),

    #[error("signature cache captured at timesteps {cached:?} but consumed at {consumed:?}")]
    CacheTimestepMismatch {
        cached: Vec<usize>,
        consumed: Vec<usize>,
    },

    #[error("generator gave up after {retries} retries: {reason}")]
    GeneratorExhausted { retries: usize, reason: String },

    #[error("category `{0}` has positive weight but no samples")]
    EmptyCategory(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("non-finite loss at step {step}: {dump}")]
    NonFiniteLoss { step: usize, dump: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("budget exceeded: {0}")]
    Budget(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
