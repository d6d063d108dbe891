//! Experiment surface: datasets, metrics persistence, correlation analysis,
//! plotting, configuration, and run orchestration.

pub mod config;
pub mod dataset;
pub mod metrics;
pub mod plots;
pub mod runner;
pub mod stats;
