//! Library side of the `follower` binary: config schema, artifact writing and
//! subcommands.

pub mod artifacts;
pub mod commands;
pub mod config;
