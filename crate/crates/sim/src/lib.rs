//! Scenario loading, experiment orchestration and metrics for the treebft
//! simulator.

pub mod harness;
pub mod scenario;

pub use harness::{compare, derive_model_inputs, run, sweep, CompareReport, RunMetrics};
pub use scenario::{load_scenario, FaultSpec, ScenarioConfig, ScenarioError, Topology};
