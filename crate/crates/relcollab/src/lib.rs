//! File formats, run directories and the command-line front end around
//! `relcollab-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod plot;
pub mod relations;
pub mod run;
pub mod volume;

pub use error::{Error, Result};
