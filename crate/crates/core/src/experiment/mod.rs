//! Synthetic data, run configuration, training driver, metrics files and plots.

pub mod config;
pub mod data;
pub mod harness;
pub mod metrics_csv;
pub mod plot;
pub mod selfcheck;

pub use config::{preset, Mode, RunConfig};
pub use harness::{
    baseline_frozen_features, load_checkpoint, resume_experiment, run_batch, run_experiment, run_mfld, RunSummary, Trainer,
};
