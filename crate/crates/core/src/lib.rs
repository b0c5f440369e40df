//! Spectral Galerkin laboratory for GOY/Sabra shell models of turbulence.
//!
//! * [`spectral`]: shell states, the operator `A`, the norm ladder and the
//!   bilinear operators.
//! * [`noise`]: covariance, RKHS geometry, Q-Wiener sampling, diffusion
//!   coefficient families and condition checks.
//! * [`dynamics`]: the inviscid controlled (skeleton) ODE and the viscous
//!   controlled SPDE, monitors and time-increment studies.
//! * [`ldp`]: rate functional, adjoint optimal control, small-noise Monte
//!   Carlo and the vanishing-viscosity experiments.
//! * [`config`] / [`studies`]: the experiment front end used by the CLI.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod dynamics;
pub mod error;
pub mod ldp;
pub mod noise;
pub mod spectral;
pub mod studies;

pub use error::{Error, Result};
