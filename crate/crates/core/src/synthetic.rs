//! Named closed-form benchmark functions for generating labeled datasets.
//!
//! The suite ships three: a separable 3-input product (exactly rank 1, so
//! low-mode models can drive the loss to interpolation error), a 2-input
//! polynomial with cross terms, and a smooth 10-input 5-output composite
//! for wide-model runs. External data comes in through CSV instead.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticFn {
    /// f(x) = sin(pi x1) sin(pi x2) sin(pi x3) on the unit cube.
    SeparableSin3,
    /// f(x) = x1^2 x2 + x1 x2^2 - x1 x2 on the unit square.
    PolyCross2,
    /// Five smooth combinations of trig, exponential, and polynomial terms
    /// over the unit 10-cube.
    Composite10x5,
}

impl SyntheticFn {
    pub fn parse(id: &str) -> Result<Self> {
        match id {
            "separable-sin-3d" => Ok(Self::SeparableSin3),
            "poly-cross-2d" => Ok(Self::PolyCross2),
            "composite-10d-5out" => Ok(Self::Composite10x5),
            other => Err(Error::UnknownFunction(other.to_string())),
        }
    }

    pub fn id(&self) -> &'static str {
        match self {
            Self::SeparableSin3 => "separable-sin-3d",
            Self::PolyCross2 => "poly-cross-2d",
            Self::Composite10x5 => "composite-10d-5out",
        }
    }

    pub fn n_inputs(&self) -> usize {
        match self {
            Self::SeparableSin3 => 3,
            Self::PolyCross2 => 2,
            Self::Composite10x5 => 10,
        }
    }

    pub fn n_outputs(&self) -> usize {
        match self {
            Self::SeparableSin3 | Self::PolyCross2 => 1,
            Self::Composite10x5 => 5,
        }
    }

    /// Canonical sampling box (unit cube for all shipped functions).
    pub fn default_bounds(&self) -> Vec<(f64, f64)> {
        vec![(0.0, 1.0); self.n_inputs()]
    }

    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n_inputs() {
            return Err(Error::ShapeMismatch(format!(
                "{} takes {} inputs, got {}",
                self.id(),
                self.n_inputs(),
                x.len()
            )));
        }
        Ok(match self {
            Self::SeparableSin3 => {
                let p: f64 = x
                    .iter()
                    .map(|&xi| (std::f64::consts::PI * xi).sin())
                    .product();
                vec![p]
            }
            Self::PolyCross2 => {
                let (a, b) = (x[0], x[1]);
                vec![a * a * b + a * b * b - a * b]
            }
            Self::Composite10x5 => {
                use std::f64::consts::PI;
                let s: f64 = x.iter().sum();
                let u1 = (PI * x[0]).sin() * (PI * x[1]).cos();
                let u2 = (-(x[2] - 0.5).powi(2) - (x[3] - 0.5).powi(2)).exp();
                let u3 = x[4] * x[5] + x[6] * x[6] - 0.5 * x[7];
                let u4 = s / 10.0;
                let u5 = (0.5 * PI * x[8]).sin() * (1.0 + x[9]);
                vec![u1, u2, u3, u4, u5]
            }
        })
    }
}
