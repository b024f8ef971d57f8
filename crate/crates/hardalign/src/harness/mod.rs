//! Experiment harness: run configuration, Adam, the training loop,
//! bit-exact checkpoints, bias/variance report drivers, and curve plots.

pub mod checkpoint;
pub mod config;
pub mod curves;
pub mod optim;
pub mod reports;
pub mod train;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use config::{AdamConfig, ModelDims, PosteriorDims, RunConfig, L2_GRID, WEIGHT_NOISE_GRID};
pub use curves::{emit_curves, parse_metrics, render_curves, Series};
pub use optim::Adam;
pub use reports::{
    report_unbiasedness, report_variance, report_variance_from_checkpoint, ReportConfig,
    SpecEntry,
};
pub use train::{
    evaluate_pairs, render_dump, train, DecodeDump, Evaluation, RunSummary, StepStats, Trainer,
    METRICS_HEADER,
};
