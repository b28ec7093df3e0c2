//! Configuration, model assembly, training, multi-resolution evaluation,
//! ablation and latency benchmarking.

pub mod config;
pub mod model;
pub mod run;
pub mod train;

pub use config::ExperimentConfig;
pub use model::{Model, Plan};
pub use run::{
    ablate, baseline_config, bench, eval_multires, train_and_eval, AblationReport, BenchReport, Checkpoint, RunReport,
};
pub use train::{evaluate_model, train, Adam, Dataset, EpochLoss, TrainOutcome};
