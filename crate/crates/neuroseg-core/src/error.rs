//! Error type shared by all core modules.

use alloc::string::String;
use core::fmt;

/// Failure in tensor construction, an operator, or a model routine.
///
/// Every operator validates its inputs and checks its outputs for
/// non-finite values, so training loops can abort cleanly instead of
/// silently producing NaN weights.
#[derive(Debug, Clone, PartialEq)]
pub enum CoreError {
    /// Shape or argument mismatch; `message` names the offending axes.
    Shape { op: &'static str, message: String },
    /// An operator produced NaN or infinity.
    NonFinite { op: &'static str },
    /// `backward` was called on a tensor that is not a single scalar.
    NonScalarLoss { elements: usize },
    /// `backward` was called twice on the same graph root.
    RepeatedBackward,
    /// `backward` was called on a tensor with no gradient path to any
    /// parameter.
    DetachedGraph,
    /// Invalid configuration value (sizes, rates, ranges).
    Config { message: String },
    /// Data fails a documented precondition (binary labels, value ranges).
    Data { message: String },
}

pub type Result<T> = core::result::Result<T, CoreError>;

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::Shape { op, message } => write!(f, "{op}: {message}"),
            CoreError::NonFinite { op } => {
                write!(f, "{op}: produced a non-finite value")
            }
            CoreError::NonScalarLoss { elements } => {
                write!(f, "backward requires a scalar loss, got {elements} elements")
            }
            CoreError::RepeatedBackward => {
                write!(f, "backward already ran for this graph")
            }
            CoreError::DetachedGraph => {
                write!(f, "tensor is not connected to any differentiable input")
            }
            CoreError::Config { message } => write!(f, "invalid config: {message}"),
            CoreError::Data { message } => write!(f, "invalid data: {message}"),
        }
    }
}

impl core::error::Error for CoreError {}

impl CoreError {
    pub fn shape(op: &'static str, message: impl Into<String>) -> Self {
        CoreError::Shape { op, message: message.into() }
    }

    pub fn config(message: impl Into<String>) -> Self {
        CoreError::Config { message: message.into() }
    }

    pub fn data(message: impl Into<String>) -> Self {
        CoreError::Data { message: message.into() }
    }
}
