//! Semantically consistent style transfer between feature maps.
//!
//! The engine combines class-wise adaptive instance normalization (statistics
//! matched per segmentation class) with selectively filtered cross-image
//! attention, both applied per step inside a small deterministic diffusion
//! harness. Everything is seeded and single-threaded: the same inputs and
//! seed produce bit-identical outputs run to run.

pub mod adain;
pub mod attention;
pub mod cli;
pub mod diffusion;
pub mod eval;
pub mod io;
pub mod pipeline;
pub mod tensor;

use std::fmt;
use std::path::PathBuf;

/// Crate-wide error type. `Io` maps to CLI exit code 2, everything else to 1.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Caller supplied data that violates an operation's preconditions.
    InvalidInput(String),
    /// Internal state does not permit the requested operation.
    InvalidState(String),
    /// A configuration value is out of range or inconsistent.
    Config(String),
    /// The operation is not supported by this implementation.
    Unsupported(String),
    /// Filesystem or codec failure, with the offending path.
    Io { path: PathBuf, reason: String },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidInput(msg) => write!(f, "invalid input: {msg}"),
            Error::InvalidState(msg) => write!(f, "invalid state: {msg}"),
            Error::Config(msg) => write!(f, "invalid configuration: {msg}"),
            Error::Unsupported(msg) => write!(f, "unsupported operation: {msg}"),
            Error::Io { path, reason } => write!(f, "i/o failure on {}: {reason}", path.display()),
        }
    }
}

impl std::error::Error for Error {}

impl Error {
    /// Process exit code the CLI reports for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
