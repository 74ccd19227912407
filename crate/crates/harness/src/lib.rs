//! Experiment harness: configuration files, checkpoint and dataset
//! formats, training runs, scaling scans, reports and the `scaledp` CLI.

pub mod checkpoint;
pub mod cli;
mod codec;
pub mod config;
pub mod dataset_io;
pub mod error;
pub mod params;
pub mod report;
pub mod run;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::ExperimentConfig;
pub use dataset_io::{read_dataset, write_dataset, DATASET_MAGIC, DATASET_VERSION};
pub use error::{HarnessError, Result};
