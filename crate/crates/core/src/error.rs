use std::path::PathBuf;

/// Errors produced anywhere in the transcription pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unsupported wav {field}: {value}")]
    UnsupportedWav { field: &'static str, value: String },

    #[error("wav parse error at byte {offset}: {message}")]
    WavParse { offset: u64, message: String },

    #[error("invalid recording: {0}")]
    Recording(String),

    #[error("label schema error: {0}")]
    LabelSchema(String),

    #[error("invalid frame geometry: {0}")]
    Geometry(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("model build error: {0}")]
    Build(String),

    #[error("shape mismatch for {name}: expected {expected:?}, found {found:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("non-finite value produced by layer {layer}")]
    NonFinite { layer: String },

    #[error("numeric failure at step {step}: {message}")]
    Numeric { step: u64, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 1 usage, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) => 1,
            Error::NonFinite { .. } | Error::Numeric { .. } => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
