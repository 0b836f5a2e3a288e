use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: file not found")]
    MissingFile { path: PathBuf },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed header: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },

    #[error("{path}: unsupported bit depth (maxval {maxval}); only 8-bit rasters are supported")]
    UnsupportedDepth { path: PathBuf, maxval: u32 },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("degenerate control points: {0}")]
    DegenerateControls(String),

    #[error("singular TPS system: {0}")]
    SingularSystem(String),

    #[error("reverse TPS model unavailable (target control points are degenerate)")]
    ReverseUnavailable,

    #[error("empty dataset")]
    EmptyDataset,

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("unknown label `{0}`")]
    UnknownLabel(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("object placement out of bounds: {0}")]
    Placement(String),

    #[error("autodiff: {0}")]
    Autodiff(String),

    #[error("missing scene bundle for grid cell {0}")]
    MissingBundle(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile { path }
        } else {
            Error::Io { path, source }
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }

    /// True for failures caused by numerics rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Diverged(_) | Error::SingularSystem(_) | Error::Autodiff(_)
        )
    }
}
