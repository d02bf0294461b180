use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or layer received inconsistent dimensions.
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    /// An argument violates an operation's preconditions.
    #[error("{op}: invalid input: {detail}")]
    InvalidInput { op: &'static str, detail: String },

    /// File could not be ingested; `offset` points at the failing byte.
    #[error("ingestion error at byte {offset} of {path}: {detail}")]
    IngestionAt {
        path: String,
        offset: u64,
        detail: String,
    },

    /// Container file failed while reading record `record`.
    #[error("ingestion error in record {record} of {path}: {detail}")]
    IngestionRecord {
        path: String,
        record: usize,
        detail: String,
    },

    /// File-level ingestion failure without a more precise location.
    #[error("ingestion error in {path}: {detail}")]
    Ingestion { path: String, detail: String },

    /// Training produced non-finite values or otherwise cannot continue.
    #[error("training error: {0}")]
    Training(String),

    /// API misuse, e.g. backward without a matching forward cache.
    #[error("usage error: {0}")]
    Usage(String),

    /// Checkpoint header disagrees with the requested architecture.
    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidInput {
            op,
            detail: detail.into(),
        }
    }
}
