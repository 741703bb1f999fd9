use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),
    #[error("malformed probability vector: {0}")]
    Simplex(String),
    #[error("missing cached output for sample {0}")]
    MissingCache(usize),
    #[error("old-model outputs are required for this loss mode")]
    MissingOracle,
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("scenario mismatch: {0}")]
    ScenarioMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("config parse error: {0}")]
    TomlDe(#[from] toml::de::Error),
    #[error("config write error: {0}")]
    TomlSer(#[from] toml::ser::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
