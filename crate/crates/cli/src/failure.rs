use std::fmt;

use stainalign::Error;

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_TRAINING: i32 = 3;
pub const EXIT_DIMENSION: i32 = 4;
pub const EXIT_DATA: i32 = 5;

/// An error on its way to the process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    pub fn new(code: i32, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(EXIT_CONFIG, message)
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self::new(EXIT_DATA, message)
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::InvalidConfig { .. } => EXIT_CONFIG,
            Error::Diverged { .. } | Error::NonFiniteGradient(_) | Error::NotConverged { .. } | Error::NonFinite(_) => {
                EXIT_TRAINING
            }
            Error::DimensionMismatch { .. } | Error::InconsistentDim { .. } => EXIT_DIMENSION,
            Error::InsufficientClass { .. }
            | Error::SingleClass
            | Error::NoEvents
            | Error::NoComparablePairs
            | Error::SolverNotConverged { .. }
            | Error::UnknownStain(_)
            | Error::InvalidDataset(_) => EXIT_DATA,
            _ => EXIT_FAILURE,
        };
        Self::new(code, e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, Failure>;
