//! File formats and subcommand implementations behind the `ctxcrf` binary.
//!
//! The split keeps everything testable without spawning a process: `formats`
//! turns external bytes into validated domain types (and back), `commands`
//! wires those types through the core library's operations.

pub mod commands;
pub mod formats;
