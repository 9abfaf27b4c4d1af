//! Evaluation metrics, baselines, run configuration and orchestration.

pub mod config;
pub mod eval;
pub mod gradcheck;
pub mod metrics;
pub mod pipeline;
