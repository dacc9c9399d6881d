use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("degenerate band: standard deviation over the band is zero")]
    DegenerateBand,

    #[error("calibration failure: {0}")]
    Calibration(String),

    #[error("phantom exceeds the field of view: {0}")]
    FieldOfView(String),

    #[error("alignment: {0}")]
    Alignment(String),

    #[error("header field `{field}`: {reason}")]
    Header { field: String, reason: String },

    #[error("missing file {}: {what}", path.display())]
    MissingFile { path: PathBuf, what: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Errors caused by bad user input rather than a failure while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Geometry(_) | Error::Domain(_) | Error::Config(_) | Error::Header { .. }
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
