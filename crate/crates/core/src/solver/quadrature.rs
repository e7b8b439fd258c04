//! Gauss-Legendre quadrature rules.
//!
//! Nodes and weights are computed once per rule by Newton iteration on the
//! Legendre polynomial, exploiting the symmetry of the roots so that the
//! rule is exactly symmetric in floating point. An `n`-point rule integrates
//! polynomials up to degree `2n - 1` exactly, which is what the assembly
//! routines rely on when they pick `n` from the patch polynomial order.

use crate::error::{Error, Result};

/// An n-point Gauss-Legendre rule on the reference interval [-1, 1].
#[derive(Debug, Clone)]
pub struct GaussLegendre {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

/// Legendre P_n and its derivative at `x` by the three-term recurrence.
fn legendre(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    // P'_n(x) = n (x P_n - P_{n-1}) / (x^2 - 1), safe away from +-1.
    let dp = (n as f64) * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}

impl GaussLegendre {
    /// Build the rule with `n` points.
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidConfig(
                "quadrature rule needs at least one point".into(),
            ));
        }
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        // Roots come in +- pairs; solve the positive half and mirror so the
        // rule is bitwise symmetric.
        for i in 0..n.div_ceil(2) {
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            if n == 1 {
                x = 0.0;
            }
            let mut dp = 1.0;
            for _ in 0..100 {
                let (p, d) = legendre(n, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() <= 1e-15 {
                    let (_, d2) = legendre(n, x);
                    dp = d2;
                    break;
                }
            }
            if n == 1 {
                // The single node sits at the singularity of the P' formula.
                x = 0.0;
                dp = 1.0;
            }
            let w = if n == 1 {
                2.0
            } else {
                2.0 / ((1.0 - x * x) * dp * dp)
            };
            // cos() starts near +1, so index i holds the i-th largest root.
            nodes[n - 1 - i] = x;
            weights[n - 1 - i] = w;
            nodes[i] = -x;
            weights[i] = w;
        }
        if n % 2 == 1 {
            nodes[n / 2] = 0.0;
        }
        Ok(Self { nodes, weights })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Nodes on [-1, 1], ascending.
    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    /// Weights matching [`Self::nodes`]; they sum to 2.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// The rule mapped onto [a, b]: pairs of (point, weight).
    pub fn mapped(&self, a: f64, b: f64) -> impl Iterator<Item = (f64, f64)> + '_ {
        let mid = 0.5 * (a + b);
        let half = 0.5 * (b - a);
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(move |(&x, &w)| (mid + half * x, w * half))
    }

    /// Integrate `f` over [a, b].
    pub fn integrate(&self, a: f64, b: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
        self.mapped(a, b).map(|(x, w)| w * f(x)).sum()
    }
}
