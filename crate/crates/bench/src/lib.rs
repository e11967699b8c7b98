//! Scenario runner for the hpcledger simulator: TOML scenario files, preset
//! experiments, CSV metrics and NDJSON exports.

pub mod experiments;
pub mod expect;
pub mod output;
pub mod scenario;

pub use experiments::{failure_sweep, overhead, run_scenario, RunResult};
pub use expect::{Expectations, Failure};
pub use scenario::{Overrides, Scenario, ScenarioFile, PRESETS};
