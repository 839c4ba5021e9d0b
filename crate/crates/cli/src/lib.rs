//! Experiment harness for the multi-exit slowdown laboratory: configuration,
//! model presets, the train/calibrate/attack/evaluate/simulate pipeline, the
//! transferability runner, and report emission.

pub mod config;
pub mod models;
pub mod pipeline;
pub mod report;
pub mod transfer;

pub use config::{default_benchmark, ExperimentConfig, TransferConfig, TransferScenario};
pub use models::ModelPreset;
pub use pipeline::{run_experiment, RunSummary};
pub use transfer::{run_transfer, TransferReport};
