//! Distributed learning of a linear density propagator from occupancy
//! snapshots, with consensus agents, spectral step-size bounds, and a
//! receding-horizon controller that turns density forecasts into
//! polytopic keep-out constraints.
//!
//! The pipeline, end to end:
//!
//! 1. [`scenario`] generates (or a sensor supplies) grid snapshots of
//!    obstacle intensity in `[0, 1]`.
//! 2. [`lifting`] vectorizes them into data matrices `(X, Y)` and knows
//!    the centralized least-squares operator that serves as the oracle.
//! 3. [`consensus`] runs the networked update over a [`graph::CommGraph`]:
//!    each agent owns a row block of the data and converges to its
//!    column block of the global operator.
//! 4. [`forecast`] propagates the latest snapshot through the learned
//!    operator and thresholds predictions into occupancy point sets.
//! 5. [`geometry`] fits Gaussian mixtures, takes confidence ellipses,
//!    and circumscribes them with half-space polytopes.
//! 6. [`mpc`] condenses the double-integrator model into a dense QP with
//!    one active facet per obstacle and horizon step; [`vehicle`] maps
//!    the accelerations back onto the nonlinear unicycle.

pub mod config;
pub mod consensus;
pub mod error;
pub mod forecast;
pub mod geometry;
pub mod graph;
pub mod io;
pub mod lifting;
pub mod mpc;
pub mod scenario;
pub mod seed;
pub mod vehicle;

pub use error::{Error, Result};
