//! IO, file formats, and command implementations for the gesture pipeline.

pub mod archive;
pub mod cfgfile;
pub mod checkpoint;
pub mod commands;
pub mod error;
pub mod runlog;

pub use error::{CliError, Result};
