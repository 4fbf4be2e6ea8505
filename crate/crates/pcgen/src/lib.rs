//! Dataset tooling, training, evaluation, and export around the core
//! reconstruction library.

use std::fmt;

pub mod cli;
pub mod config;
pub mod dataset;
pub mod evaluate;
pub mod export;
pub mod tnsr_io;
pub mod train;

/// NaN losses and failed numeric verifications. The command line maps this
/// class to its own exit code.
#[derive(Debug)]
pub struct NumericFailure(pub String);

impl fmt::Display for NumericFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "numeric failure: {}", self.0)
    }
}

impl std::error::Error for NumericFailure {}

/// Bad invocations: malformed flags, rejected config fields, impossible
/// flag combinations. Maps to the usage exit code.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for UsageError {}
