//! Cavity mean-field theory for penalized least-squares regression.
//!
//! The crate is organised around the decoupled single-variable problem that
//! the cavity argument reduces an `(N, M)` regression to:
//!
//! - [`model`]: ensemble and penalty types, the scalar prox map with its local
//!   susceptibility, and random problem instances.
//! - [`meanfield`]: zero-temperature self-consistency for `(q, χ̄)`, the
//!   basis-pursuit limit and the sparse-recovery phase boundary.
//! - [`lp`]: a dense revised-simplex solver for (perturbed) basis pursuit.
//! - [`experiment`]: finite-size staircase responses and empirical MSE.
//! - [`suscept`]: exact susceptibility matrices for smooth penalties and the
//!   resummed mean-susceptibility equation.
//! - [`finitetemp`]: the finite-temperature single-node solver used to check
//!   the fluctuation–dissipation limit.
//! - [`cli`]: command-line front end.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod experiment;
pub mod finitetemp;
pub mod lp;
pub mod meanfield;
pub mod model;
pub mod quad;
pub mod suscept;

pub use error::{Error, Result};
