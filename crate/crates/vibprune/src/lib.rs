//! File formats, configuration and the command-line driver around
//! `vibprune-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod datafile;
pub mod error;
pub mod metrics;
pub mod report;
pub mod run;

pub use config::Config;
pub use error::{Error, Result};
