//! Deterministic discrete-event simulation of GeoBFT and a flat PBFT baseline.

pub mod client;
pub mod cost;
pub mod engine;
pub mod faults;
pub mod latency;
pub mod metrics;
pub mod scenario;
pub mod trace;

pub use engine::{run, RunOptions, RunOutput, TraceMode};
pub use metrics::Metrics;
pub use scenario::{Protocol, Scenario, ScenarioError};
