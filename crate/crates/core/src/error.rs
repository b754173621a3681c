use thiserror::Error;

/// Failures of the pure physics layer.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid resource choice: {0}")]
    InvalidChoice(String),
    #[error("energy causality violated: spending {spent} J with only {available} J stored")]
    CausalityViolation { spent: f64, available: f64 },
}

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("combination weights must be nonnegative and sum to one (sum = {0})")]
    Weights(f64),
    #[error("malformed model file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset is empty")]
    Empty,
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum OtaError {
    #[error("instance exceeds the enumeration bound: {0}")]
    TooLarge(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("invalid value for `{key}`: {message}")]
    Value { key: String, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Top-level error for simulation runs and the CLI.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Ota(#[from] OtaError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("constraint violated at step {step}: {message}")]
    Constraint { step: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Other(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
