//! Experiment harness around `fova-core`: config parsing, the four
//! subcommands, and metrics serialization.

pub mod commands;
pub mod config;
pub mod metrics;
