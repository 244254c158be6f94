//! Configuration, run-directory management and stage orchestration for the
//! `ccgen` command-line tool.

pub mod config;
pub mod error;
pub mod pipeline;

pub use config::{Preset, RunConfig};
pub use error::{CliError, Result};
pub use pipeline::{Run, Stage};
