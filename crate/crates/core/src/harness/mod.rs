//! Experiment harness: config files, on-disk formats, and the command
//! implementations behind the `rnnda` binary.

pub mod commands;
pub mod config;
pub mod io;
