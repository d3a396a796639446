//! Command-line surface for `swcrt-core`: configuration, data ingestion,
//! CSV tables and SVG figures.

pub mod commands;
pub mod config;
pub mod error;
pub mod format;
pub mod ingest;
pub mod svg;

pub use commands::{run, write_artifacts, Artifact, Outcome};
pub use config::{load_config, parse_config, Command, RunConfig};
pub use error::{CliError, Result};
