//! Experiment runner: config files, dataset specifiers, checkpoints, metrics
//! and the subcommand bodies behind the `semix` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod metrics;
pub mod source;

use semix::Error;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_FORMAT: i32 = 4;
pub const EXIT_CHECK: i32 = 5;

/// Process exit status for a failure class.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Usage(_) => EXIT_CONFIG,
        Error::NonFinite { .. } | Error::Diverged { .. } => EXIT_NUMERIC,
        Error::Format { .. } | Error::Length(_) | Error::Io(_) => EXIT_FORMAT,
        Error::Dimension(_) | Error::Validation(_) => 1,
    }
}
