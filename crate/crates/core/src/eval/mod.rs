//! Scoring of test images and the detection / localisation metrics.

pub mod metrics;
pub mod pro;
pub mod report;
pub mod scoring;

pub use metrics::{auroc, average_precision, f1max};
pub use pro::pro;
pub use report::{EvalReport, ObjectMetrics};
pub use scoring::{image_score, pixel_map, ScoreMap};
