//! Orchestration of the substitution experiments: configuration, the stage
//! pipeline with its manifest cache, and report emission.

pub mod config;
pub mod error;
pub mod manifest;
pub mod stages;

pub use config::RunConfig;
pub use error::{PipelineError, Result};
pub use manifest::{Manifest, RunStatus};
pub use stages::{attach, Pipeline, RunData, Stage, TargetData};
