//! Command-line orchestration of the weaklab pipeline and the annotation service.

pub mod bench;
pub mod config;
pub mod error;
pub mod manifest;
pub mod pipeline;
pub mod serve;
pub mod store;

pub use error::{CliError, Result};
