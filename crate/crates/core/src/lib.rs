//! Limit-cycle region-of-attraction certification for hybrid nonlinear systems.
//!
//! The pipeline: locate a periodic orbit of a hybrid system, build a family of
//! transversal surfaces around it, derive the transverse dynamics and their
//! linearization, solve periodic Lyapunov/Riccati equations for a candidate
//! quadratic Lyapunov function, and certify a region of orbital attraction by
//! solving sum-of-squares programs (as semidefinite programs) over sampled
//! phases.

pub mod error;
pub mod hybrid;
pub mod jet;
pub mod ode;
pub mod orbit;
pub mod plqr;
pub mod polynomial;
pub mod sdp;
pub mod sos;
pub mod transverse;

pub use error::Error;

/// Convenience result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;
