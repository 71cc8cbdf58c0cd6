use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("size error: {0}")]
    Size(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("parse error at {path}: {message}")]
    Parse { path: String, message: String },

    #[error("unsupported version {found} (expected {expected})")]
    UnsupportedVersion { found: String, expected: String },

    #[error("training diverged at step {step}: non-finite loss (last finite losses: {last_finite:?})")]
    Divergence { step: usize, last_finite: Vec<f64> },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code used by the command line front-end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) | Error::Divergence { .. } => 3,
            _ => 2,
        }
    }
}
