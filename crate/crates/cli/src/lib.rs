//! Command implementations behind the `hipprune` binary.

pub mod commands;
pub mod config;
pub mod report;

pub use config::{OutputPaths, Overrides, RunConfig};
