//! Discounted H∞ state feedback for nonlinear systems through the stable
//! manifold of the associated contact Hamiltonian system, with a neural
//! approximation of the optimal costate.
//!
//! Pipeline: [`model`] → [`linear`] → [`manifold`] → [`approximator`] →
//! [`closedloop`]. [`io`] and [`signal`] hold the formats and expression
//! parser used by the `hji` command-line tool.

pub mod approximator;
pub mod closedloop;
pub mod error;
pub mod io;
pub mod linear;
pub mod manifold;
pub mod model;
pub mod ode;
pub mod signal;

pub use error::{Error, Result};
