//! Fixed-precision float formatting shared by every CSV/report emitter.
//!
//! All artifacts print floats with 17 significant digits so that repeated
//! runs with the same seed produce byte-identical files and values survive
//! a parse round-trip at full f64 precision.

/// Format with 17 significant digits in scientific notation.
pub fn g17(x: f64) -> String {
    format!("{:.16e}", x)
}
