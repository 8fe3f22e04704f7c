//! Error type shared by the core modules.

use alloc::string::String;
use core::fmt;

/// Errors raised by tensor ops, model evaluation, and the adaptation loop.
#[derive(Debug, Clone, PartialEq)]
pub enum CoreError {
    /// Tensor or layer shapes do not compose; names the offending layer.
    ShapeMismatch { context: String },
    /// A forward or backward pass produced a non-finite value.
    Numeric { context: String },
    /// Configuration rejected before any compute.
    InvalidConfig { context: String },
}

impl CoreError {
    pub fn shape(context: impl Into<String>) -> Self {
        CoreError::ShapeMismatch { context: context.into() }
    }

    pub fn numeric(context: impl Into<String>) -> Self {
        CoreError::Numeric { context: context.into() }
    }

    pub fn config(context: impl Into<String>) -> Self {
        CoreError::InvalidConfig { context: context.into() }
    }
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::ShapeMismatch { context } => write!(f, "shape mismatch: {context}"),
            CoreError::Numeric { context } => write!(f, "non-finite value: {context}"),
            CoreError::InvalidConfig { context } => write!(f, "invalid config: {context}"),
        }
    }
}

impl core::error::Error for CoreError {}
