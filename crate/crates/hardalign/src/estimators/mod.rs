//! Score-function gradient estimators for the hard-alignment objectives.

pub mod baselines;
pub mod batch;
pub mod gradients;
pub mod report;

pub use baselines::{
    loo_baseline, simple_average_baseline, temporal_loo_baseline, BaselineKind, BaselineSpec,
    ParametricBaseline, SignalNormalizer,
};
pub use batch::{emission_matching_time, RewardSeries, Trajectory, TrajectoryBatch};
pub use gradients::{
    batch_from_rollouts, nvil_gradient, reinforce_gradient, vimco_gradient, EstimatorDiagnostics,
    EstimatorOutput,
};
pub use report::{
    estimator_report, variance_csv, variance_report, EstimatorKind, EstimatorReport, ReportRow,
    ReportSpec, VarianceRow,
};
