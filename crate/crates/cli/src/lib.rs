//! Command-line front end and HTTP service for the contextgpt pipeline.

pub mod args;
pub mod commands;
pub mod server;

pub use args::Cli;
pub use commands::run;
