pub mod backend;
pub mod caption;
pub mod composition;
pub mod config;
pub mod decompose;
pub mod error;
pub mod evaluation;
pub mod generation;
pub mod manifest;
pub mod orchestrator;
pub mod prompts;
pub mod quality;
pub mod raster;
pub mod store;

pub use error::{PipelineError, Result};
