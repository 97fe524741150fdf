use std::path::PathBuf;

/// Crate-wide error type. `Config` and `UnknownTokenizer` indicate caller
/// mistakes (bad parameters, missing capabilities); everything else is a
/// runtime failure.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("embedding error: {0}")]
    Embedding(String),

    #[error("extraction error: {0}")]
    Extraction(String),

    #[error("gateway error{}: {message}", status.map(|s| format!(" (http {s})")).unwrap_or_default())]
    Gateway { status: Option<u16>, message: String },

    #[error("transport error: {0}")]
    Transport(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("persistence error: {0}")]
    Persistence(String),

    #[error("corrupted index file {file}: {detail}")]
    Corrupted { file: String, detail: String },

    #[error("unsupported index format version {found} (this build reads version {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("index requires tokenizer '{id}', which is not available in this build")]
    UnknownTokenizer { id: String },

    #[error("io error on {path}: {source}")]
    IoAt {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors a caller fixes by changing inputs or configuration
    /// rather than by retrying.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Config(_) | Error::UnknownTokenizer { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Wraps an io::Error with the path it happened on.
pub(crate) fn io_at(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::IoAt { path, source }
}
