//! Command-line front end: config files, trajectory CSV and the subcommands.

pub mod commands;
pub mod config;
pub mod csvio;
