use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty partition: {0}")]
    EmptyPartition(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("insufficient auxiliary data: {0}")]
    InsufficientAux(String),
    #[error("failed to decode image {path}: {reason}")]
    Decode { path: String, reason: String },
    #[error("unsupported architecture: {0}")]
    UnsupportedArch(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("rotation needs a square image, got {h}x{w}")]
    NonSquareInput { h: usize, w: usize },
    #[error("location crops need even square dimensions, got {h}x{w}")]
    OddDimensions { h: usize, w: usize },
    #[error("contrastive batch needs at least 2 pairs, got {0}")]
    DegenerateBatch(usize),
    #[error("incompatible tasks: {0}")]
    IncompatibleTasks(String),
    #[error("missing task: {0}")]
    MissingTask(String),
    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    DivergenceDetected { epoch: usize, loss: f64 },
    #[error("no checkpoint records to select from")]
    EmptyHistory,
    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),
    #[error("non-finite feature values: {0}")]
    SingularFeatures(String),
    #[error("incompatible voting scheme: {0}")]
    IncompatibleScheme(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn format(path: impl AsRef<std::path::Path>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.as_ref().display().to_string(),
            reason: reason.into(),
        }
    }
}
