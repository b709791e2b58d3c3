//! Scenario files, trial runner, metric extraction and reports.

pub mod metrics;
pub mod profile;
pub mod report;
pub mod runner;
pub mod scenario;

pub use metrics::{
    extract_availability_metrics, extract_scaling_metrics, max_tolerable_failures, MetricsRecord, ScalingRecord,
};
pub use profile::ProfilePreset;
pub use report::{compare, render_csv, render_curves, render_table, Comparison, RunReport, Summary, TrialReport};
pub use runner::{run_many, run_scenario, run_scenario_with, run_trial, Execution, TrialRun};
pub use scenario::{Scenario, ScheduleEntry, ScheduledAction};
