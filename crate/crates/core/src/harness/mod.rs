//! Data generation, optimisation, checkpoints, training runs and reports.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod finetune;
pub mod metrics;
pub mod optim;
pub mod reconstruct;
pub mod report;
pub mod synth;
pub mod train;
pub mod verify;
