use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown model `{0}`")]
    UnknownModel(String),

    #[error("unknown test function `{0}`")]
    UnknownTestFunction(String),

    #[error("test function `{name}` has derivatives up to order {available}, order {required} needed")]
    InsufficientSmoothness {
        name: String,
        available: usize,
        required: usize,
    },

    #[error("negative variance {0}")]
    NegativeVariance(f64),

    #[error("invalid weights: {0}")]
    InvalidWeights(String),

    #[error("invalid time grid: {0}")]
    InvalidGrid(String),

    #[error("invalid filter configuration: {0}")]
    InvalidConfig(String),

    #[error("not a correction time (step {step})")]
    NotCorrectionTime { step: usize },

    #[error("correction pending at step {step}; correct before evolving further")]
    CorrectionPending { step: usize },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("oracle requires linear model, got `{0}`")]
    OracleRequiresLinear(String),

    #[error("missing recorded functional `{0}`")]
    MissingFunctional(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("malformed csv {path}: {reason}")]
    Csv { path: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
