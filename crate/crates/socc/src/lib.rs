//! Files, synthetic data, training, benchmarking and the `socc` command
//! line on top of `socc-core`.

pub mod bench;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod formats;
pub mod memory;
pub mod pipeline;
pub mod report;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
