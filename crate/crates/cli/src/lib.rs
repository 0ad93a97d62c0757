//! Command-line runner: config loading, the end-to-end pipeline, and run
//! directories.

pub mod commands;
pub mod config;
pub mod pipeline;

pub use commands::{run, Cli};
pub use config::{BackendSpec, RunConfig};
pub use pipeline::{AnswerArtifacts, Pipeline, PipelineError};
