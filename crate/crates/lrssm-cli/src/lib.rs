//! Command layer for `lrssm`: dataset files, synthetic generators,
//! experiment configuration, metrics and the scaling benchmark.

pub mod bench;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod generate;
pub mod metrics;
