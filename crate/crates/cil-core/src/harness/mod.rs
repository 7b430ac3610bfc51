//! Everything around the model: datasets, the incremental protocol,
//! synthetic data, checkpoints, experiment orchestration, and reporting.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod experiment;
pub mod plot;
pub mod protocol;
pub mod report;
pub mod synthetic;
