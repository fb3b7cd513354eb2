//! Checkpoints and run configuration files.

pub mod checkpoint;
pub mod config;

pub use config::RunConfig;
