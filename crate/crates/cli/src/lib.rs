//! Command-line front end: configuration, subcommands and the invariant
//! suite.

pub mod check;
pub mod commands;
pub mod config;
