//! Experiment configuration, metrics records and suite runners.

mod config;
mod metrics;
mod runner;

pub use config::{
    BackpropSection, DatasetSection, ExperimentConfig, ExperimentKind, KalmanSection, NetworkSection, PidSection,
    PrecisionSection, PrecisionStudySection, TrainingSection,
};
pub use metrics::{MetricsRecord, MetricsWriter};
pub use runner::{
    backprop_gap, comparison_graph, exit_code, random_spd, random_state_space, run_experiment, step_disturbance,
    stream_fixed_point, trajectory_path, RunSummary, SavedModel,
};
