use thiserror::Error;

/// Errors raised anywhere in the simulator.
#[derive(Debug, Error)]
pub enum Error {
    #[error("no samples")]
    NoSamples,

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("ill-conditioned source (min eigenvalue {0:e})")]
    IllConditioned(f64),

    #[error("non-finite input: {0}")]
    NonFinite(String),

    #[error("diverged: {0}")]
    Diverged(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("need a pair of samples, got {0}")]
    NeedPair(usize),

    #[error("missing class covariance for class {0}")]
    MissingClassCovariance(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("infeasible partition: {0}")]
    Infeasible(String),

    #[error("idx format: {0}")]
    Idx(String),

    #[error("truncated {0}")]
    Truncated(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization: {0}")]
    Serialization(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn dims(msg: impl Into<String>) -> Self {
        Error::DimensionMismatch(msg.into())
    }
}
