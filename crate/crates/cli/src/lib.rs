//! Library behind the `burstnet` executable: manifest handling, config
//! files and the `preprocess`, `featurize`, `train`, `predict` and
//! `evaluate` stages.

mod app;
pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;

pub use app::run;
pub use commands::*;
pub use error::{CliError, Result};
