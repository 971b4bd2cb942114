//! Training runs, evaluation, checkpoints, reports, and the CLI.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod report;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::{RunMode, TrainConfig};
pub use report::RunReport;
pub use train::{accuracy, evaluate, evaluate_model, train_baseline, train_distill, Dataset};
