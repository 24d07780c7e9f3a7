//! Datasets, persistence, evaluation and timing.

pub mod bench;
pub mod config;
pub mod data;
pub mod eval;

pub use bench::{bench_time_cost, median, BenchPlan, CostTerms, ScalingRow, TimeCostReport};
pub use config::{run_experiment, ExperimentConfig, RunSummary};
pub use eval::{evaluate, subset_indices, Evaluation, SeedMetrics, Summary};
