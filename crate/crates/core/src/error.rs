//! Error type shared across the crate.

use alloc::string::String;
use core::fmt;

/// Errors surfaced by the engine, target builders, losses, and evaluation.
///
/// Non-finite values are treated as contract violations (fail fast) rather
/// than being propagated through the numerics.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Dimension or extent mismatch.
    Shape(String),
    /// Argument outside the mathematical domain of an operation.
    Domain(String),
    /// A NaN or infinity appeared where all values must be finite.
    NonFinite(String),
    /// Misuse of the gradient tape (non-scalar root, double backward, ...).
    Autodiff(String),
    /// A parameter update was requested without populated gradients.
    MissingGrad(String),
    /// Invalid configuration or argument value.
    Invalid(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::Domain(m) => write!(f, "domain error: {m}"),
            Error::NonFinite(m) => write!(f, "non-finite value: {m}"),
            Error::Autodiff(m) => write!(f, "autodiff error: {m}"),
            Error::MissingGrad(m) => write!(f, "missing gradient: {m}"),
            Error::Invalid(m) => write!(f, "invalid argument: {m}"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
