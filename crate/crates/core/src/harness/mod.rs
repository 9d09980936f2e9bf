//! Experiment orchestration: the step loop, ablations, oracle suites and
//! report files.

pub mod ablation;
pub mod config;
pub mod oracle;
pub mod report;
pub mod runner;

pub use config::{ExperimentConfig, ScoreSign, Task};
pub use runner::{run_sgoif, run_sgoif_with_threads, MetricsReport, RunOutput};
