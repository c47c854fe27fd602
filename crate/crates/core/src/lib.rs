//! Safety filtering for uncertain control-affine systems.
//!
//! A disturbance observer (DOB) estimates the lumped model uncertainty with a
//! precomputable error bound. That estimate and bound are folded into a
//! high-order control barrier function condition that is linear in the input,
//! and a small quadratic program projects any proposed action (for example the
//! action of an untrained RL agent) onto the resulting safe set.
//!
//! Module map:
//!
//! * [`dynamics`]: control-affine models, RK4 integration, Lipschitz-certified
//!   disturbance generators.
//! * [`dob`]: state predictor, piecewise-constant estimation law, error bound.
//! * [`hocbf`]: barrier sequences and the affine safe-action constraint.
//! * [`qp`]: dense active-set QP with slack fallback.
//! * [`envs`]: unicycle and planar quadrotor benchmark plants, episode loop.
//! * [`policy`]: scripted action sources and the external process bridge.
//! * [`harness`]: configuration-driven experiments and metrics.

pub mod dob;
pub mod dynamics;
pub mod envs;
mod error;
pub mod harness;
pub mod hocbf;
pub mod par;
pub mod policy;
pub mod qp;

pub use error::{Error, Result};
