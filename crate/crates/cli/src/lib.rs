//! Command-line front end for training, data generation, classifier fitting,
//! guided decoding and the comparison experiments.

pub mod commands;
pub mod config;
pub mod experiment;
pub mod manifest;
pub mod report;

use game_core::GameError;

/// Bad flags, unreadable or invalid config files.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Process exit code for a failed command.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return EXIT_USAGE;
        }
        if let Some(g) = cause.downcast_ref::<GameError>() {
            return match g {
                GameError::Contract(_) => EXIT_USAGE,
                GameError::Numeric(_) | GameError::Divergence { .. } | GameError::Metric(_) => EXIT_NUMERIC,
                GameError::Capacity { .. }
                | GameError::Identity(_)
                | GameError::Training(_)
                | GameError::Data(_)
                | GameError::Io(_)
                | GameError::Json(_) => EXIT_DATA,
            };
        }
        if cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() || cause.is::<csv::Error>() {
            return EXIT_DATA;
        }
    }
    EXIT_DATA
}
