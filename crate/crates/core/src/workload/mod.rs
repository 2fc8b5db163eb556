pub mod arrival;
pub mod config;
pub mod experiment;
pub mod metrics;
pub mod plan;
pub mod spec;

pub use arrival::{ingest_arrival_trace, parse_timestamps, poisson_arrivals, scale_arrivals};
pub use config::{
    stage_depths, AppEntry, ArrivalConfig, ExperimentConfig, HistoryConfig, InstancesConfig, MetricsConfig, StrategyConfig,
};
pub use experiment::{
    calibrate, measure_overhead, Calibration, CalibrationStep, Experiment, ExperimentReport, OverheadReport,
    StrategySummary,
};
pub use metrics::{compute_metrics, sorting_accuracy, AgentMetrics, RunMetrics, SortingAccuracy};
pub use plan::{instantiate_workflow, PlannedCall, WorkflowPlan};
pub use spec::{
    templates, topo_depth_priority, AgentSpec, AppSpec, BranchOption, Downstream, Feedback, LengthDist,
};
