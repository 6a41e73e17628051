//! Configuration, fold planning, reporting and the end-to-end pipeline.

pub mod config;
pub mod folds;
pub mod pipeline;
pub mod report;

pub use config::{RunConfig, RESOLVED_CONFIG_FILE};
pub use folds::{make_folds, make_folds_for, FoldOptions, FoldPlan, FoldRun};
pub use pipeline::{run_pipeline, PipelineOptions, Stage};
pub use report::{mean_and_std_error, Report, StdErrorKind};
