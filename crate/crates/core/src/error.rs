//! Error type shared by every module in the crate.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

/// Errors raised by tensor, model, training, and analysis operations.
#[derive(Debug, Clone, PartialEq)]
pub enum CoreError {
    /// Two shapes that should have agreed did not.
    ShapeMismatch {
        context: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// An index (class label, layer, coordinate) fell outside its valid range.
    IndexOutOfRange {
        context: &'static str,
        index: usize,
        bound: usize,
    },
    /// A caller violated an operation's contract (non-scalar backward root,
    /// step on a frozen parameter, empty batch, ...).
    Contract(&'static str),
    /// A linear system was singular where an invertible one was required.
    SingularSystem(&'static str),
    /// An iterative numerical routine failed to converge.
    NumericalFailure(&'static str),
    /// A serialized container had the wrong magic bytes or version.
    Format(String),
    /// A serialized container ended mid-tensor; carries the tensor name.
    Corrupt { tensor: String },
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::ShapeMismatch {
                context,
                left,
                right,
            } => write!(
                f,
                "{context}: shape mismatch, left={left:?} right={right:?}"
            ),
            CoreError::IndexOutOfRange {
                context,
                index,
                bound,
            } => write!(f, "{context}: index {index} out of range (bound {bound})"),
            CoreError::Contract(msg) => write!(f, "contract violation: {msg}"),
            CoreError::SingularSystem(ctx) => {
                write!(f, "{ctx}: system is singular (no ridge term to rescue it)")
            }
            CoreError::NumericalFailure(ctx) => write!(f, "{ctx}: failed to converge"),
            CoreError::Format(msg) => write!(f, "format error: {msg}"),
            CoreError::Corrupt { tensor } => {
                write!(f, "corrupt container: truncated while reading tensor '{tensor}'")
            }
        }
    }
}

impl core::error::Error for CoreError {}
