//! Pathwise stochastic optimal control via rough paths.
//!
//! The crate is organized around the pipeline
//!
//! 1. [`rough_path`] — level-2 rough paths on time grids (Brownian lifts,
//!    Chen algebra, grid Hölder metrics);
//! 2. [`rde`] — forward controlled rough differential equations and backward
//!    linear adjoint equations (second-order Davie scheme);
//! 3. [`control`] — per-path deterministic optimal control: payoffs, dynamic
//!    programming over a state mesh, a rough HJB solver driven by smooth
//!    approximations, and Pontryagin-type optimality diagnostics;
//! 4. [`duality`] — Monte Carlo lower bounds from adapted feedback policies
//!    and upper bounds from penalized pathwise optimization (martingale and
//!    control-linear penalties);
//! 5. [`lqc`] — closed-form linear-quadratic oracles (Riccati solutions,
//!    optimal feedbacks, explicit optimal penalties) used to validate the
//!    Monte Carlo machinery;
//! 6. [`harness`] — experiment configuration, deterministic orchestration and
//!    report emission for the `roughctl` binary.

pub mod control;
pub mod duality;
pub mod error;
pub mod fixtures;
pub mod harness;
pub mod io;
pub mod lqc;
pub mod rde;
pub mod rough_path;

pub use error::{Error, Result};
