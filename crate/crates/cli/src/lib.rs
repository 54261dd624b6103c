//! Command layer for the `eqdisc` binary: run configuration and the
//! pipeline stages.

pub mod commands;
pub mod config;

use eqdisc::Error;

/// Exit status for an error: 2 for configuration problems, 1 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        _ => 1,
    }
}
