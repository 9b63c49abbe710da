use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("matrix is singular or rank deficient")]
    Singular,

    #[error("timestep {t} outside schedule range 0..={max}")]
    TimestepOutOfRange { t: usize, max: usize },

    #[error("negative residual variance {0:e} (alpha_prev - sigma^2 < 0)")]
    NegativeVariance(f64),

    #[error("covariance is not positive semi-definite (eigenvalue {0:e})")]
    NotPsd(f64),

    #[error("config error: {0}")]
    Config(String),

    #[error("format error at {location}: {detail}")]
    Format { location: String, detail: String },

    #[error("incompatible data: {0}")]
    Incompatible(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(location: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format {
            location: location.into(),
            detail: detail.into(),
        }
    }

    /// Configuration and usage problems, as opposed to runtime failures.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::InvalidArgument(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
