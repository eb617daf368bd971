use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("class index {index} out of range 1..={classes}")]
    ClassOutOfRange { index: usize, classes: usize },

    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("malformed attention: {0}")]
    MalformedAttention(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    /// Whether the error reflects a broken invariant rather than bad input or I/O.
    pub fn is_invariant_violation(&self) -> bool {
        matches!(self, Error::NonFinite(_) | Error::MalformedAttention(_) | Error::ConfigMismatch(_))
    }
}
