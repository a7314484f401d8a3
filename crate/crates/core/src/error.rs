use std::path::PathBuf;

/// Errors raised across the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("insufficient history: need index >= {needed}, got {got}")]
    InsufficientHistory { needed: usize, got: usize },

    #[error("sequence too short: {0}")]
    TooShort(String),

    #[error("matrix is not diagonalizable (eigenvector condition number {condition:.3e})")]
    NotDiagonalizable { condition: f64 },

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("rank deficient regression: {0}")]
    RankDeficient(String),

    #[error("no forward cache available for backward pass")]
    MissingCache,

    #[error("operation requires a variational encoder")]
    NotVariational,

    #[error("non-finite loss at epoch {epoch}: {detail}")]
    NonFiniteLoss { epoch: usize, detail: String },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }
}
