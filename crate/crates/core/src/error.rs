use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("out of range: {0}")]
    OutOfRange(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("wrong PA regime: {0}")]
    WrongRegime(String),

    #[error("degenerate model: {0}")]
    DegenerateModel(String),

    #[error("degenerate noise covariance: {0}")]
    DegenerateNoise(String),

    #[error("regime violation: {0}")]
    RegimeViolation(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("optimization failed: objective returned {value} at theta = {theta:?}")]
    OptimizationFailure { theta: Vec<f64>, value: f64 },

    #[error("scenario error in `{key}`: {message}")]
    Validation { key: String, message: String },

    #[error("failed to parse {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("{failed} of {total} trials failed at sweep point {point}")]
    TooManyFailures {
        point: usize,
        failed: usize,
        total: usize,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn validation(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            key: key.into(),
            message: message.into(),
        }
    }
}
