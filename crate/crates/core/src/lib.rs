//! Dual memory bank anomaly detection over precomputed patch features.
//!
//! The engine never touches images directly. A feature extractor writes one
//! `.dmft` grid per image plus `.dmmk` annotation masks and a JSON manifest;
//! everything downstream (bank construction, knowledge enhancement, score
//! learning, evaluation) runs on those files.

pub mod error;
pub mod eval;
pub mod feature_store;
pub mod imageops;
pub mod knowledge;
pub mod learner;
pub mod memory_bank;
pub mod pipeline;
pub mod synth;

mod binio;

pub use error::{Error, Result};
