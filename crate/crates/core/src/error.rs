use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite input")]
    NonFiniteInput,
    #[error("empty loss")]
    EmptyLoss,
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("zero-length normalization axis")]
    ZeroLengthAxis,
    #[error("binary targets must be 0 or 1, found {0}")]
    NonBinaryTarget(f64),
    #[error("target id {target} outside vocabulary of size {vocab}")]
    TargetOutOfRange { target: usize, vocab: usize },
    #[error("empty video")]
    EmptyVideo,
    #[error("negative dissimilarity")]
    NegativeDissimilarity,
    #[error("quantile {0} outside [0, 1]")]
    QuantileOutOfRange(f64),
    #[error("frame index {index} out of range for {frames} frames")]
    FrameOutOfRange { index: usize, frames: usize },
    #[error("concept vocabulary underflow: {available} candidates for {requested} concepts")]
    ConceptUnderflow { available: usize, requested: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::QuantileOutOfRange(_) => 1,
            Error::NonFiniteInput
            | Error::NonFiniteGradient
            | Error::Numeric(_)
            | Error::EmptyLoss => 3,
            _ => 2,
        }
    }
}
