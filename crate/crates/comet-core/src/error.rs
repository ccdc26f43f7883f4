//! Error type shared across the core crate.

use alloc::string::String;
use core::fmt;

/// Errors produced by core operations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CoreError {
    /// Incompatible matrix or sequence shapes.
    DimensionMismatch(String),
    /// An operation received an empty input it cannot handle.
    EmptyInput(&'static str),
    /// A parameter value is outside its valid range.
    InvalidArgument(String),
    /// A modality id has no registered state (encoder, specific layer, ...).
    UnknownModality(String),
    /// A parameter path expected by an operation is absent.
    MissingParameter(String),
    /// A computed quantity is NaN or infinite; the payload names it.
    NonFinite(String),
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::DimensionMismatch(msg) => write!(f, "dimension mismatch: {msg}"),
            CoreError::EmptyInput(what) => write!(f, "empty input: {what}"),
            CoreError::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            CoreError::UnknownModality(id) => write!(f, "unknown modality: {id}"),
            CoreError::MissingParameter(path) => write!(f, "missing parameter: {path}"),
            CoreError::NonFinite(what) => write!(f, "non-finite value in {what}"),
        }
    }
}

pub type Result<T> = core::result::Result<T, CoreError>;
