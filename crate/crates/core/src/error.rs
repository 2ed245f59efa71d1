use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum StemError {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("index {index} is not causally admissible for row {row}")]
    InadmissibleIndex { row: usize, index: usize },

    #[error("keep set for row {row} is not sorted and unique")]
    UnsortedKeepSet { row: usize },

    #[error("query block {query_block} has an empty selection")]
    EmptySelection { query_block: usize },

    #[error("row {row} has no admissible scores")]
    DegenerateRow { row: usize },

    #[error("corrupt tensor file {path}: {reason}")]
    CorruptFile { path: PathBuf, reason: String },

    #[error("unsupported tensor format in {path}: {reason}")]
    UnsupportedFormat { path: PathBuf, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, StemError>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> StemError {
    StemError::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
