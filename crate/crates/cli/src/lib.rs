//! Config-driven experiment runner: every subcommand reads one TOML file and
//! writes CSV/JSON outputs (and binary checkpoints) with provenance attached.

pub mod commands;
pub mod config;
pub mod error;

pub use commands::{run, Command, Outcome};
pub use config::ExperimentConfig;
pub use error::CliError;
