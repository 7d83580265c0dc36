//! Scenario definitions, batch runs, metrics and plots for the microgrid
//! testbed.

pub mod metrics;
pub mod plot;
pub mod run;
pub mod scenario;

pub use metrics::{compute_metrics, Limits, Metrics, MetricsOptions};
pub use run::{run_scenario, RunError, RunOptions, RunOutcome};
pub use scenario::{bundled, Scenario, ScenarioError};
