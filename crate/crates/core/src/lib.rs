//! Pilot-wave dynamics: guidance, relaxation to quantum equilibrium, field
//! modes on expanding backgrounds, minisuperspace trajectories and the
//! experiment models built from them.

pub mod cosmo;
pub mod error;
pub mod experiments;
pub mod fit;
pub mod guidance;
pub mod io;
pub mod mini;
pub mod ode;
pub mod psi;
pub mod relaxation;
pub mod rng;
pub mod special;
pub mod stats;

pub use error::{Error, Result};
pub use guidance::{IntegratorConfig, Trajectory, Velocity, VelocityField, WaveFunction};
pub use ode::Status;
pub use psi::{Mode, Superposition, SuperpositionSpec, System, C64};

/// Version of this crate, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
