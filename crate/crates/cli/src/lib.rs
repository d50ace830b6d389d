//! Command-line front end: argument parsing, backend wiring, run manifests.

pub mod args;
pub mod commands;
pub mod manifest;
pub mod settings;
pub mod toy;

pub use args::Cli;
pub use commands::run;
