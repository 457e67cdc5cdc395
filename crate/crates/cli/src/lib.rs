//! Command-line plumbing around `rfcn-core`: run configuration, stack
//! directories, PGM export and the subcommands of the `rfcn` binary.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod pgm;

pub use config::{ModelConfig, RunConfig};
