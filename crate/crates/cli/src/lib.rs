//! Library side of the `chaoscast` binary: configuration schema, artifact
//! writers, and the pipeline stages each subcommand drives.

pub mod artifacts;
pub mod config;
pub mod runner;

pub use artifacts::RunManifest;
pub use config::{parse_config, RunConfig, Task};
pub use runner::{execute, Action};
