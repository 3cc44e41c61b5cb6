//! Configuration-driven experiments: placeholder.

pub struct ExperimentConfig;
pub struct ExperimentReport;
