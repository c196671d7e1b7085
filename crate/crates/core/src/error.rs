use thiserror::Error;

/// Errors produced by the pruning engine and its supporting modules.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("range error: {0}")]
    Range(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("format error in {section}: {detail}")]
    Format { section: String, detail: String },

    #[error("i/o error on {path}: {detail}")]
    Io { path: String, detail: String },

    #[error("missing pages for token indices {indices:?}")]
    MissingPage { indices: Vec<usize> },

    #[error("partial commit: {} page(s) could not be cached", uncached.len())]
    PartialCommit { uncached: Vec<crate::kv_store::PageId> },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn format(section: &str, detail: impl Into<String>) -> Self {
        Error::Format {
            section: section.to_string(),
            detail: detail.into(),
        }
    }
}
