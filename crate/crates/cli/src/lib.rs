//! Pipeline driver: run configuration, JSONL scene files, mining reports and
//! the subcommands behind the `bevmine` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod report;
pub mod scene_io;

pub use commands::{cmd_dgp, cmd_eval, cmd_generate, cmd_mine, cmd_pipeline};
pub use config::{Overrides, RunConfig};
pub use error::CliError;
