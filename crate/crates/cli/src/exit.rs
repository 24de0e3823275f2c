//! Process exit codes.

use std::fmt;

use gsmakeup::Error;

pub const CONFIG: u8 = 2;
pub const MISSING_ASSET: u8 = 3;
pub const NUMERICAL: u8 = 4;
pub const OTHER: u8 = 1;

/// Marks an error as a configuration problem.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return CONFIG;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Numerical(_) => NUMERICAL,
                Error::Io { .. }
                | Error::Image { .. }
                | Error::Format { .. }
                | Error::MissingGuidance { .. }
                | Error::UnfinalizedTexture
                | Error::DegenerateTriangle { .. }
                | Error::EmptyMesh
                | Error::InvalidMesh(_)
                | Error::InvalidModel(_) => MISSING_ASSET,
                _ => CONFIG,
            };
        }
    }
    OTHER
}
