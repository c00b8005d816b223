//! Numerical homogenization of pseudo-parabolic systems with drift.
//!
//! The pseudo-parabolic system is solved in its split form: an elliptic
//! equation for `V` coupled to the ODE `dU/dt + L U = G V`. The crate provides
//! the fine-scale solver at a given period `eps`, the periodic cell problems
//! with their effective tensors, the upscaled solver with its corrector
//! gradient (stepped or as a memory convolution), and numerical certificates
//! for the energy estimate, the eps-uniform bound and micro/macro convergence.

pub mod cell;
pub mod coefficients;
pub mod discretization;
pub mod error;
pub mod micro;
pub mod stepping;
pub mod upscaled;
pub mod verification;

mod nodal;

pub use error::{Error, Result};
