//! Command-line front end: configuration, the staged pipeline and the
//! synthetic fixture generator.

pub mod app;
pub mod config;
pub mod pipeline;
pub mod synth;

pub use app::{run, EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION};
pub use config::{ConfigError, Overrides, PipelineConfig};
pub use pipeline::{Pipeline, Stage};
