//! Experiment orchestration: configuration, seeded pipelines, manifests,
//! aggregation and the `mprlab` CLI's command implementations.

pub mod aggregate;
pub mod commands;
pub mod config;
pub mod csvio;
pub mod manifest;
pub mod pipeline;

pub use config::RunConfig;
