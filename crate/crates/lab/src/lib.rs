//! Experiment runner for ordinal MoE training: configuration files,
//! synthetic datasets, metrics streams, ablation grids and the verification
//! suites behind the `tiermoe` binary.

pub mod config;
pub mod data;
mod error;
pub mod experiment;
pub mod metrics;
pub mod verify;

pub use error::{LabError, LabResult};
