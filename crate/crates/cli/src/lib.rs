//! Pipeline orchestration for intention-space reward aggregation.
//!
//! Each stage reads the artifacts of earlier stages from one output directory and
//! records a manifest of its inputs, config fingerprint and outputs, so reruns with
//! unchanged inputs are skipped and tampered upstream files are caught by name.

pub mod config;
pub mod error;
pub mod manifest;
pub mod stages;

pub use config::{Overrides, PipelineConfig};
pub use error::CliError;
pub use stages::{run_pipeline, run_stage, Stage, Status};
