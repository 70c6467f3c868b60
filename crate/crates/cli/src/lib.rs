//! File formats, run bookkeeping and subcommands around `polar-layout-core`.

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod jsonl;
pub mod manifest;
pub mod store;

pub use error::{CliError, CliResult};
