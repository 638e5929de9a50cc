use thiserror::Error;

/// Crate-wide error type. Variants map onto the CLI exit codes:
/// config errors exit 2, numerical failures exit 3, missing artifacts exit 4.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at layer {layer}: expected {expected:?}, got {got:?}")]
    LayerShape {
        layer: usize,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite loss at sample {sample}: {value}")]
    NonFiniteLoss { sample: usize, value: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("rejection ratio leaves empty validation set")]
    EmptyValidationSet,

    #[error("empty input")]
    EmptyInput,

    #[error("rejection ratio {0} removes every sample")]
    AllSamplesRemoved(f64),

    #[error("unknown corruption kind: {0}")]
    UnknownCorruption(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("checkpoint format: {0}")]
    CheckpointFormat(String),

    #[error("data format: {0}")]
    DataFormat(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Process exit code for the CLI: 2 config, 3 numerical, 4 missing artifact, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => 2,
            Error::NonFiniteLoss { .. } | Error::Numerical(_) => 3,
            Error::MissingArtifact(_) => 4,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
