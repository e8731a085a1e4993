//! Federated unlearning by rapid retraining.
//!
//! Clients delete samples, then the federation retrains a fresh global model
//! on the remaining data with a diagonal empirical-Fisher quasi-Newton update
//! with momentum ([`fim`]). The retrain-from-scratch SGD baseline
//! ([`unlearning::run_baseline_retrain`]) runs through the same federated
//! machinery so the two can be compared on utility and wall time
//! ([`metrics`]).

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod federated;
pub mod fim;
pub mod metrics;
pub mod model;
pub mod seed;
pub mod unlearning;

pub use error::{Error, Result};
pub use model::{Example, ModelKind, ModelSpec, ParamVector};

/// Version stamped into checkpoints and reports.
pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");
