//! Command-line front end: config loading with flag overrides, and the gen /
//! train / eval / ablate / sweep subcommands as library functions.

pub mod commands;
pub mod config;
