//! File formats and command-line driver for the gated-attention classifier
//! in [`gatn_core`].

pub mod checkpoint;
pub mod cli;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod metrics;
pub mod pnm;

pub use error::{CliError, CliResult};
