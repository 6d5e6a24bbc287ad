//! Scenario-driven front end for the forced-oscillation toolkit.

pub mod build;
pub mod expr;
pub mod pipeline;
pub mod scenario;

pub use pipeline::{run, Outcome, RunOptions};
pub use scenario::{parse_scenario, Scenario, ScenarioError, Stage};
