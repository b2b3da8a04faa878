use std::path::PathBuf;

/// Crate-wide error type. Every fallible public operation returns
/// [`Result`] so the CLI can render a single-line diagnostic.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed on-disk data: containers, manifests, wav headers.
    #[error("{0}")]
    Format(String),

    /// Tensor or layer dimension mismatch. `location` names the layer or
    /// operation that rejected the input.
    #[error("shape mismatch in {location}: expected {expected}, got {got}")]
    Shape {
        location: String,
        expected: String,
        got: String,
    },

    #[error("missing parameter {0}")]
    MissingParam(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArg(String),

    /// Non-finite loss, degenerate input, or other numeric failure.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A required run artifact (checkpoint, manifest, feature file) is absent.
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(
        location: impl Into<String>,
        expected: impl std::fmt::Debug,
        got: impl std::fmt::Debug,
    ) -> Self {
        Error::Shape {
            location: location.into(),
            expected: format!("{expected:?}"),
            got: format!("{got:?}"),
        }
    }
}
