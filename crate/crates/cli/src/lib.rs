//! Command-line front end: configuration files, run manifests and the
//! subcommands wiring the core library into reproducible experiments.

pub mod commands;
pub mod config;
pub mod manifest;
pub mod render;

pub use config::Config;
pub use manifest::RunManifest;
