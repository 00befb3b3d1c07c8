//! File formats, run configuration and the subcommands behind the `adaptvig` binary.

pub mod commands;
pub mod config;
pub mod io;
