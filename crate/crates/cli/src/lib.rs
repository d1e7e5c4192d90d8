//! Experiment orchestration for synthaug: configuration, augmentation presets,
//! trainer adapters, the run matrix and reporting.

pub mod config;
pub mod error;
pub mod matrix;
pub mod preset;
pub mod report;
pub mod trainer;

pub use error::{Error, Result};
