//! Experiment orchestration for physics-informed echo state networks: dataset
//! generation, training, forecasting, ensembles and reservoir-size sweeps.

pub mod commands;
pub mod config;
pub mod manifest;

pub use config::{ExperimentConfig, SystemName};
pub use manifest::{Manifest, Seeds};
