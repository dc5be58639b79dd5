//! Storage formats, experiment drivers and the `warm` command line on top of
//! [`warm_core`].

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod experiments;
pub mod format;
pub mod sidecar;
pub mod tables;

pub use error::{AppError, AppResult};
