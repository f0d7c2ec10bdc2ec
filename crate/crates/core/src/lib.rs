//! Numerical laboratory for the stationary Stokes system
//!
//! ```text
//! D_α(A^{αβ} D_β u) + ∇p = f + D_α f_α,    div u = g
//! ```
//!
//! with coefficients that may be merely measurable in the `x₁` direction.
//! The crate discretizes the system on a staggered (MAC) grid, solves the
//! resulting saddle-point problem, and measures the quantities that the
//! `W¹_q` theory for such systems is stated in: `L_q` norms, mean
//! oscillations, sharp and maximal functions, Hölder seminorms and jumps of
//! the flux combination `U = A^{1β}D_β u + (p, 0, …, 0)` across layers.
//!
//! Module map:
//! - [`coeffs`]: coefficient tensors, ellipticity and the partial-oscillation `γ`
//! - [`domain`]: geometries, Lipschitz flatness, balls and dyadic filtrations
//! - [`grid`]: MAC discretization, assembly, gradients and `U`
//! - [`linsolve`]: saddle-point solvers and the divergence solver
//! - [`analysis`]: norms, oscillations, sharp/maximal functions, jumps
//! - [`oracle`]: dense and analytic ground truth
//! - [`harness`]: verification experiments, reports and run configuration

pub mod analysis;
pub mod coeffs;
pub mod domain;
pub mod error;
pub mod grid;
pub mod harness;
pub mod linsolve;
pub mod oracle;
pub mod sparse;

mod dense;

pub use error::{Error, Result};
