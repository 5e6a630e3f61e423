//! Experiment plumbing: toy data, configuration, checkpoints, plots and
//! the train → unlearn → evaluate pipeline.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod experiment;
pub mod plot;
