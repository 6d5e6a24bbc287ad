//! Forced oscillations of mechanical systems: integration, periodic
//! segments, shooting for periodic orbits and the velocity cutoff.

pub mod curve;
pub mod cutoff;
pub mod error;
pub mod gallery;
pub mod ode;
pub mod orbit;
pub mod segment;
pub mod system;
pub mod timefn;

pub use error::{Error, Result};
pub use ode::{IntegratorConfig, State, Trajectory};
pub use system::{GrowthBound, MetricSpec, SystemSpec};
