//! Grid-based interpolating networks.
//!
//! Models here interpolate between values stored on a tensor-product grid
//! rather than composing dense layers. Each input dimension carries a 1D
//! grid and a local polynomial basis with the Kronecker delta property, so
//! the model passes exactly through its nodal values. Multi-dimensional
//! outputs come from full, Tucker, or canonical-polyadic couplings of the
//! per-dimension bases, which keeps parameter counts polynomial in the
//! number of inputs.
//!
//! On top of the forward/gradient machinery sit three workflows: regression
//! on sampled data ([`trainer`]), direct PDE solves by Galerkin assembly or
//! residual/energy minimization ([`solver`]), and recovery of unknown inputs
//! from observations ([`calibrate`]).

// Validation deliberately writes `!(x > 0.0)` on floats: the negated form
// also rejects NaN, which `x <= 0.0` would wave through.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Numeric kernels index several parallel arrays with one counter; rewriting
// them as iterator chains obscures the stencil arithmetic.
#![allow(clippy::needless_range_loop)]

pub mod dataset;
pub mod error;
pub mod fmt;
pub mod grid;
pub mod interp;
pub mod model;
pub mod optim;
pub mod solver;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
