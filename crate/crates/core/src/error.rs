use std::io;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("input shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate pilot: zero entry on subcarrier {0}")]
    DegeneratePilot(usize),

    #[error("deep fade on subcarrier {index}: |h| = {magnitude:e}")]
    DeepFade { index: usize, magnitude: f64 },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("training diverged at epoch {epoch}: {detail}")]
    Divergence { epoch: usize, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    /// Process exit code for the failure class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Io(_) => 3,
            Error::Json(e) if e.is_io() => 3,
            Error::Json(_) => 2,
            Error::Shape(_)
            | Error::DegeneratePilot(_)
            | Error::DeepFade { .. }
            | Error::Numeric(_)
            | Error::Divergence { .. } => 4,
            Error::Format(_) => 5,
        }
    }
}
