//! Pipeline orchestration: run configuration, stages, metric evaluation and
//! reports.

pub mod commands;
pub mod config;
pub mod evaluate;
pub mod pipeline;
pub mod report;
pub mod svg;

pub use config::{BackendSpec, CorpusSpec, DrillSpec, ModelSpec, RunConfig, ENV_PREFIX};
pub use pipeline::{run_pipeline, Manifest, Run, RunSummary, StageStatus};
pub use report::report;
