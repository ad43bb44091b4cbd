//! Simulation and verification toolkit for controlled mean-field
//! forward-backward stochastic systems with delay and jumps.
//!
//! The pipeline is: [`forward::simulate_forward`] for the particle state,
//! [`backward::solve_backward`] for `(Y, Z, K)`, then
//! [`adjoint::solve_adjoint`] for `(lambda, p, q, r)`. The
//! [`verification`] module checks maximum-principle conclusions on top of
//! these solutions and [`recursive_utility`] runs the consumption example.

pub mod adjoint;
pub mod backward;
pub mod delay;
pub mod error;
pub mod forward;
pub mod hamiltonian;
pub mod model;
pub mod models;
pub mod paths;
pub mod pipeline;
pub mod recursive_utility;
pub mod regression;
pub mod verification;

pub use error::{Error, Result};
