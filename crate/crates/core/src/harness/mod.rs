//! Scenario construction, closed-loop experiments, metrics and result files.

pub mod config;
pub mod experiment;
pub mod report;
pub mod scenario;

pub use config::{ExperimentConfig, PlannerKind};
pub use experiment::{compute_rmse, run_experiment, train_models, RunMetrics, RunOutput, TrainedModels};
pub use report::{benchmark_suite, write_results, write_ticks};
pub use scenario::{random_obstacle_field, Scenario, TerrainSchedule};
