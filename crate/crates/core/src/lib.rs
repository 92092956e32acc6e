//! Simulation and learning toolkit for integrated sensing and communication
//! over segmented-waveguide pinching-antenna arrays.
//!
//! The crate is layered bottom-up:
//!
//! * [`physics`]: in-waveguide propagation, near-field channels, effective
//!   per-segment channels.
//! * [`metrics`]: SINR, sum rate, illumination power, constraint flags.
//! * [`env`]: the decision process (scenarios, projection, segment gating,
//!   reward, step/reset).
//! * [`neural`]: small MLPs with backpropagation, Gaussian policies, Adam.
//! * [`agents`]: SHRL, SPRL, A2C, PPO and random control, and the training
//!   loop.
//! * [`experiments`]: key/value configs, seeded sweeps, CSV artifacts.

pub mod agents;
pub mod config;
pub mod env;
pub mod error;
pub mod experiments;
pub mod metrics;
pub mod neural;
pub mod physics;

pub use config::SystemConfig;
pub use error::{Error, Result};
pub use metrics::{BeamMatrix, MetricReport};
pub use physics::{AntennaLayout, Point2, Point3, Scenario};
