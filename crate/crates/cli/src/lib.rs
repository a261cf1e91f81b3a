//! Experiment runner: configuration, subcommands and artifact output.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;
