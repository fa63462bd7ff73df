//! The `asp` command-line driver.

pub mod args;
mod commands;
pub mod config;
pub mod error;
pub mod manifest;

pub use args::{Cli, Command};
pub use commands::run;
