use std::path::PathBuf;

/// Errors produced by the detection pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// The byte stream is not a well-formed NPY/CSV/JSON document.
    #[error("format error: {0}")]
    Format(String),

    /// The document is well formed but carries the wrong dtype, rank or columns.
    #[error("schema error: {0}")]
    Schema(String),

    /// A tensor violates its domain invariants.
    #[error("validation error: {0}")]
    Validation(String),

    /// An argument lies outside its admissible domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// The iterative solver produced a non-finite iterate.
    #[error("numerical error at iteration {iteration}: {message}")]
    Numerical { iteration: usize, message: String },

    /// A configuration cannot be realised.
    #[error("config error: {0}")]
    Config(String),

    /// The segment covers only ignore-labelled pixels and carries no training label.
    #[error("segment {0} lies entirely on ignore pixels")]
    ExcludedSegment(usize),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad input data or arguments rather than the environment.
    pub fn is_usage(&self) -> bool {
        !matches!(self, Error::Io { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
