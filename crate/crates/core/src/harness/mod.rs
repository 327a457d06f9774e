//! Training, evaluation, ablation and the command-line front end.

pub mod ablation;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod optim;
pub mod train;

pub use config::{DataConfig, RunConfig, TrainConfig};
pub use optim::{lr_schedule, optimizer_step, OptimConfig, OptimizerKind, OptimizerState};
pub use train::{run_training, RunOptions, RunOutcome, RunReport};
