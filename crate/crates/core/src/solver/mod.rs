//! PDE solvers built on the grid interpolant.
//!
//! `poisson` solves a manufactured two-bump boundary value problem two
//! ways (direct Galerkin and energy minimization) and measures H1
//! convergence. `heat` solves a space-time-parameter heat equation with a
//! separated CP representation and checks it against the finite-difference
//! marcher it also provides. `quadrature`, `banded`, and `dense` supply
//! the Gauss-Legendre rules and the linear-algebra kernels the solvers
//! assemble with.

pub mod banded;
pub mod dense;
pub mod heat;
pub mod poisson;
pub mod quadrature;
