//! Deterministic discrete-event simulation of stream queries placed on fog
//! device hierarchies.

pub mod app;
pub mod cli;
pub mod engine;
mod fixed;
pub mod kernel;
pub mod metrics;
pub mod placement;
pub mod scenario;
pub mod topology;
pub mod workload;
