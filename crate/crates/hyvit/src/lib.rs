//! File formats, reports, network simulation and the command driver for the
//! hyvit accelerator model.

pub mod cli;
pub mod config;
pub mod error;
pub mod image;
pub mod netsim;
pub mod report;

pub use error::{Error, Result};
