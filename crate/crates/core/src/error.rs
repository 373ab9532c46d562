use thiserror::Error;

use crate::netcore::DenseNet;

pub type Result<T, E = RecError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum RecError {
    #[error("invalid architecture: {0}")]
    InvalidArch(String),

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("empty dataset: {0}")]
    EmptyDataset(&'static str),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid transform action: {0}")]
    InvalidAction(String),

    #[error("action cap exceeded: {kind} actions {count} > {cap}")]
    CapExceeded {
        kind: &'static str,
        count: usize,
        cap: usize,
    },

    #[error("non-finite value during {context}")]
    NonFinite {
        context: String,
        /// Network state at the point of failure, kept for post-mortem dumps.
        net: Option<Box<DenseNet>>,
    },

    #[error("bad checkpoint header: expected magic {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl RecError {
    pub(crate) fn shape(context: &'static str, expected: usize, actual: usize) -> Self {
        RecError::ShapeMismatch {
            context,
            expected,
            actual,
        }
    }
}
