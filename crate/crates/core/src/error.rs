use thiserror::Error;

/// Errors raised anywhere in the training toolkit.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum DwfError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("initialization error: {0}")]
    Init(String),

    #[error("non-finite loss or activation in layer {layer}")]
    Numeric { layer: usize },

    #[error("training diverged at step {step}")]
    Diverged { step: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("length error: {0}")]
    Length(String),

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("did not converge after {iterations} iterations (last change {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("layer collapse: layer {layer} has no remaining weights")]
    LayerCollapse { layer: usize },

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for DwfError {
    fn from(e: std::io::Error) -> Self {
        DwfError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for DwfError {
    fn from(e: serde_json::Error) -> Self {
        DwfError::Format(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, DwfError>;
