//! Command-line front end: CSV ingest, run configuration, result bundles
//! and predictions for hierarchical GP time-series clustering.

pub mod app;
pub mod bundle;
pub mod config;
pub mod csvio;
pub mod error;
pub mod predict;

pub use error::{exit, CliError, Result};
