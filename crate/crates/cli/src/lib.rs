//! Harness library behind the `altgrad` binary: run configuration, the four
//! measurement commands, and report emission.

pub mod instance;
pub mod report;
pub mod runners;
pub mod spec;

use std::fmt;

/// Errors a run can end with, mapped onto the tool's exit codes: capacity
/// and degeneracy failures exit 3, threshold violations exit 2, everything
/// else exits 1.
#[derive(Debug)]
pub enum HarnessError {
    BadSpec(String),
    Capacity(String),
    Core(altgrad_core::Error),
    Io(std::io::Error),
}

impl fmt::Display for HarnessError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HarnessError::BadSpec(msg) => write!(f, "invalid run spec: {msg}"),
            HarnessError::Capacity(msg) => write!(f, "capacity: {msg}"),
            HarnessError::Core(e) => write!(f, "{e}"),
            HarnessError::Io(e) => write!(f, "io: {e}"),
        }
    }
}

impl std::error::Error for HarnessError {}

impl From<altgrad_core::Error> for HarnessError {
    fn from(e: altgrad_core::Error) -> Self {
        HarnessError::Core(e)
    }
}

impl From<std::io::Error> for HarnessError {
    fn from(e: std::io::Error) -> Self {
        HarnessError::Io(e)
    }
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Capacity(_) => 3,
            HarnessError::Core(
                altgrad_core::Error::CapacityExceeded { .. }
                | altgrad_core::Error::DegenerateRowSum { .. },
            ) => 3,
            _ => 1,
        }
    }
}
