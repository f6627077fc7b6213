use thiserror::Error;

/// Errors shared across the crate.
#[derive(Error, Debug)]
pub enum Error {
    #[error("label {label} out of range for {classes} classes")]
    InvalidLabel { label: usize, classes: usize },

    #[error("shape mismatch: {left} vs {right} in {context}")]
    ShapeMismatch {
        left: String,
        right: String,
        context: &'static str,
    },

    #[error("feature dimension {got} does not match model input dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("{0} requires a nonempty input")]
    EmptyInput(&'static str),

    #[error("metric undefined: {0}")]
    UndefinedMetric(&'static str),

    #[error("non-finite {what} at iteration {iteration}")]
    NonFinite { what: &'static str, iteration: u64 },

    #[error("config key `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("scene generation failed: {0}")]
    Generation(String),

    #[error("malformed {format}: {reason}")]
    Format { format: &'static str, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
