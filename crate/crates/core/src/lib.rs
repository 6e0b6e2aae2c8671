//! Data-driven certification of incremental global asymptotic stability for
//! networks of unknown, degree-one homogeneous, discrete-time subsystems.
//!
//! The pipeline samples each subsystem's step oracle, projects the samples on
//! the unit sphere, fits a quadratic incremental Lyapunov candidate with a
//! scenario linear program, bounds the sampling gap with a Lipschitz estimate,
//! and combines the per-subsystem functions through a small-gain condition.

pub mod baseline;
pub mod certify;
pub mod dynamics;
pub mod error;
pub mod lipschitz;
pub mod lp;
pub mod pipeline;
pub mod sampling;
pub mod scenario;
pub mod vecops;

pub use error::{Error, Result};
