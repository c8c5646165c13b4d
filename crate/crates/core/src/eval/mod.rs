//! Metrics, run configuration and the end-to-end pipeline.

pub mod config;
pub mod metrics;
pub mod pipeline;
pub mod svg;

pub use config::{split_of, RunConfig, Split};
pub use metrics::{intensity_metrics, structural_metrics, MetricsReport, StructuralReport};
pub use pipeline::{run_pipeline, Workspace};
