use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("EstimationError: {0}")]
    Estimation(String),

    #[error("ModelError: {0}")]
    Model(String),

    #[error("TrainError: iteration {iteration}: {message}")]
    Train { iteration: usize, message: String },

    #[error("ConfigError: {0}")]
    Config(String),

    #[error("EvalError: {0}")]
    Eval(String),

    #[error("ParseError: {path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("IoError: {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Short class name, matching the prefix of the `Display` output.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Estimation(_) => "EstimationError",
            Error::Model(_) => "ModelError",
            Error::Train { .. } => "TrainError",
            Error::Config(_) => "ConfigError",
            Error::Eval(_) => "EvalError",
            Error::Parse { .. } => "ParseError",
            Error::Io { .. } => "IoError",
        }
    }

    pub(crate) fn dim_mismatch(what: &str, expected: usize, got: usize) -> Self {
        Error::Model(format!(
            "dimension mismatch for {what}: expected {expected}, got {got}"
        ))
    }
}
