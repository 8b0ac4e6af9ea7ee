//! Ergodic control of dissipative SDEs through the stochastic maximum
//! principle: forward simulation, adjoint BSDE regression, duality checks,
//! optimality tests and an adjoint-gradient optimizer.

pub mod adjoint;
pub mod config;
pub mod cost;
pub mod duality;
pub mod error;
pub mod exec;
pub mod forward;
pub mod model;
pub mod report;
pub mod rng;
pub mod smp;
pub mod stats;
pub mod verify;

pub use error::{Error, Result};
