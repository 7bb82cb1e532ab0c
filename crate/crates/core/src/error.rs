use std::path::PathBuf;

/// Errors raised while decoding one of the binary containers (BVID, BTFW).
#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),
    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),
    #[error("dimensions {0:?} overflow or contain zero")]
    DimensionOverflow(Vec<u32>),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("{0} unexpected trailing bytes")]
    TrailingBytes(usize),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid video: {0}")]
    InvalidVideo(String),
    #[error("invalid value for `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("class index {index} out of range for {classes} classes")]
    ClassIndex { index: usize, classes: usize },
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("training diverged at step {step} (loss = {loss})")]
    Diverged { step: usize, loss: f64 },
    #[error("non-finite loss at iteration {iteration} of {stage}")]
    NonFinite { stage: String, iteration: usize },
    #[error("numerical domain error: {0}")]
    Numerical(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config { field: field.into(), reason: reason.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Wraps the error with the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage { stage, source: Box::new(self) }
    }

    /// Innermost error, looking through stage wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
