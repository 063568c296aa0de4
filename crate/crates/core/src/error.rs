use std::path::PathBuf;

/// Broad classes of failure, used by the command line to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Precondition,
    Numeric,
    Io,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{0}")]
    Precondition(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("no identities found under {}", .0.display())]
    NoIdentities(PathBuf),

    #[error("identity `{identity}` has {count} image(s), at least 2 are required ({})", .path.display())]
    TooFewImages {
        identity: String,
        count: usize,
        path: PathBuf,
    },

    #[error("insufficient images for the requested split: {}", .0.join(", "))]
    InsufficientImages(Vec<String>),

    #[error("cannot decode image {}: {source}", .path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("{context}: non-finite value at epoch {epoch}, step {step}")]
    NonFinite {
        context: String,
        epoch: usize,
        step: usize,
    },

    #[error("hull solver did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("i/o error at {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid artifact {}: {reason}", .path.display())]
    Format { path: PathBuf, reason: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub fn precondition(msg: impl Into<String>) -> Self {
        Error::Precondition(msg.into())
    }

    pub fn shape(expected: impl std::fmt::Debug, got: impl std::fmt::Debug) -> Self {
        Error::ShapeMismatch {
            expected: format!("{expected:?}"),
            got: format!("{got:?}"),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Wraps an error with the pipeline stage it came from.
    pub fn in_stage(self, stage: impl Into<String>) -> Self {
        Error::Stage {
            stage: stage.into(),
            source: Box::new(self),
        }
    }

    /// Stamps the training position onto a non-finite error raised deeper down.
    pub fn at_step(self, epoch: usize, step: usize) -> Self {
        match self {
            Error::NonFinite { context, .. } => Error::NonFinite { context, epoch, step },
            other => other,
        }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::NonFinite { .. } | Error::NoConvergence { .. } | Error::Tensor(_) => {
                ErrorCategory::Numeric
            }
            Error::Io { .. } | Error::Image { .. } | Error::Format { .. } => ErrorCategory::Io,
            Error::Stage { source, .. } => source.category(),
            _ => ErrorCategory::Precondition,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
