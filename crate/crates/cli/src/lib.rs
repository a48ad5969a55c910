//! Experiment runner for channel planting: training the teacher, the
//! initial network and fixed-width baselines, running the planting search,
//! and tabulating results averaged over trials.

pub mod config;
pub mod experiment;
pub mod report;

pub use config::{DatasetKind, ExperimentConfig, PhaseConfig, PlantingConfig, ScheduleConfig};
pub use experiment::{load_splits, BaselineLoss, Experiment};
pub use report::{aggregate, collect_rows, report, ReportRow, ResultRow};
