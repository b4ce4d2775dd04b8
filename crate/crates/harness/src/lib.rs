//! Datasets, the training loop, checkpoints, histogram export and the
//! `samlab` command line.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod hist;
pub mod train;

pub use config::{DataKind, DatasetSpec, RunConfig};
pub use error::{Error, Result};
pub use train::{train, MetricsRow, RunOutcome, TrainOptions};
