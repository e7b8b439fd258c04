//! Local polynomial shape functions over a 1D grid.
//!
//! For an evaluation point the owning segment is located, the patch nodes
//! are collected, and a Lagrange basis over those nodes is evaluated. The
//! basis satisfies the Kronecker delta property at nodes, sums to one, and
//! reproduces polynomials up to the patch order. Values agree across
//! segment boundaries because every patch contains both segment endpoints,
//! so the interpolant is continuous (derivatives may jump at nodes).

use crate::error::{Error, Result};
use crate::grid::{Grid1D, PatchScheme, ProductGrid};

/// Shape function values and derivatives at one point, restricted to the
/// patch of the owning segment. Entries align with `nodes`; all other shape
/// functions vanish identically at this point. `d2` is populated only when
/// requested with `deriv_order = 2`.
#[derive(Debug, Clone)]
pub struct ShapeEval {
    pub segment: usize,
    pub nodes: Vec<usize>,
    pub value: Vec<f64>,
    pub d1: Vec<f64>,
    pub d2: Option<Vec<f64>>,
}

impl ShapeEval {
    /// Dense length-`n_nodes` value vector with zeros off the patch.
    pub fn scatter_values(&self, n_nodes: usize) -> Vec<f64> {
        let mut out = vec![0.0; n_nodes];
        for (&j, &v) in self.nodes.iter().zip(&self.value) {
            out[j] = v;
        }
        out
    }
}

/// Evaluate the patch basis at `x`.
///
/// `deriv_order` selects how far to differentiate: 0 fills only `value`
/// (`d1` comes along for free and is always filled), 2 additionally fills
/// `d2`. Requesting second derivatives from a linear basis is rejected:
/// they are identically zero inside segments, which would silently break
/// any collocation of a second-order operator.
pub fn shape_eval(
    grid: &Grid1D,
    scheme: &PatchScheme,
    x: f64,
    deriv_order: u8,
) -> Result<ShapeEval> {
    if deriv_order > 2 {
        return Err(Error::InvalidScheme(format!(
            "deriv_order must be 0, 1, or 2, got {deriv_order}"
        )));
    }
    if deriv_order == 2 && scheme.poly_order < 2 {
        return Err(Error::SecondDerivativeUnavailable(scheme.poly_order));
    }
    let segment = grid.locate_segment(x)?;
    let nodes = grid.patch_nodes(segment, scheme)?;
    let xs: Vec<f64> = nodes.iter().map(|&j| grid.nodes()[j]).collect();
    let n = xs.len();

    let mut value = vec![0.0; n];
    let mut d1 = vec![0.0; n];
    let mut d2 = if deriv_order == 2 { Some(vec![0.0; n]) } else { None };
    for a in 0..n {
        // Denominator of the Lagrange cardinal polynomial for node a.
        let mut denom = 1.0;
        for b in 0..n {
            if b != a {
                denom *= xs[a] - xs[b];
            }
        }

        let mut val = 1.0;
        for b in 0..n {
            if b != a {
                val *= x - xs[b];
            }
        }
        value[a] = val / denom;

        let mut sum1 = 0.0;
        for c in 0..n {
            if c == a {
                continue;
            }
            let mut prod = 1.0;
            for b in 0..n {
                if b != a && b != c {
                    prod *= x - xs[b];
                }
            }
            sum1 += prod;
        }
        d1[a] = sum1 / denom;

        if let Some(d2) = d2.as_mut() {
            let mut sum2 = 0.0;
            for c in 0..n {
                if c == a {
                    continue;
                }
                for d in 0..n {
                    if d == a || d == c {
                        continue;
                    }
                    let mut prod = 1.0;
                    for b in 0..n {
                        if b != a && b != c && b != d {
                            prod *= x - xs[b];
                        }
                    }
                    sum2 += prod;
                }
            }
            d2[a] = sum2 / denom;
        }
    }

    Ok(ShapeEval { segment, nodes, value, d1, d2 })
}

/// Dense per-dimension shape vector: length `J_dim`, at most P+1 nonzeros.
pub fn shape_vector(
    pgrid: &ProductGrid,
    scheme: &PatchScheme,
    dim: usize,
    x: f64,
) -> Result<Vec<f64>> {
    let grid = pgrid.dim(dim);
    let se = shape_eval(grid, scheme, x, 0).map_err(|e| match e {
        // locate_segment reports dimension 0; restore the caller's dim.
        Error::OutOfDomain { value, lo, hi, .. } => Error::OutOfDomain { dim, value, lo, hi },
        other => other,
    })?;
    Ok(se.scatter_values(grid.n_nodes()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn schemes() -> Vec<PatchScheme> {
        vec![
            PatchScheme::new(1, 1, 1).unwrap(),
            PatchScheme::new(2, 2, 2).unwrap(),
            PatchScheme::new(2, 2, 3).unwrap(),
            PatchScheme::new(2, 3, 3).unwrap(),
        ]
    }

    #[test]
    fn hat_functions_at_segment_midpoint() {
        let grid = Grid1D::uniform(0.0, 10.0, 3).unwrap();
        let se = shape_eval(&grid, &PatchScheme::linear(), 2.5, 0).unwrap();
        assert_eq!(se.nodes, vec![0, 1]);
        assert_eq!(se.value, vec![0.5, 0.5]);
    }

    #[test]
    fn kronecker_delta_at_nodes() {
        let grid = Grid1D::uniform(0.0, 10.0, 11).unwrap();
        for scheme in schemes() {
            for k in 0..grid.n_nodes() {
                let se = shape_eval(&grid, &scheme, grid.nodes()[k], 0).unwrap();
                let dense = se.scatter_values(grid.n_nodes());
                for (j, v) in dense.iter().enumerate() {
                    let expect = if j == k { 1.0 } else { 0.0 };
                    assert!(
                        (v - expect).abs() < 1e-12,
                        "scheme {scheme:?}, node {k}, shape {j}: {v}"
                    );
                }
            }
        }
    }

    #[test]
    fn partition_of_unity_and_zero_d1_sum() {
        let grid = Grid1D::uniform(-2.0, 3.0, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for scheme in schemes() {
            for _ in 0..500 {
                let x = rng.random_range(-2.0..=3.0);
                let se = shape_eval(&grid, &scheme, x, 1).unwrap();
                let sum: f64 = se.value.iter().sum();
                let dsum: f64 = se.d1.iter().sum();
                assert!((sum - 1.0).abs() < 1e-12, "scheme {scheme:?} at x={x}: {sum}");
                assert!(dsum.abs() < 1e-10, "scheme {scheme:?} at x={x}: d1 sum {dsum}");
            }
        }
    }

    #[test]
    fn polynomial_reproduction_up_to_order() {
        let grid = Grid1D::uniform(0.0, 10.0, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for scheme in schemes() {
            for _ in 0..200 {
                let x = rng.random_range(0.0..=10.0);
                let se = shape_eval(&grid, &scheme, x, 0).unwrap();
                for deg in 0..=scheme.poly_order as i32 {
                    let interp: f64 = se
                        .nodes
                        .iter()
                        .zip(&se.value)
                        .map(|(&j, &v)| grid.nodes()[j].powi(deg) * v)
                        .sum();
                    let exact = x.powi(deg);
                    let scale = exact.abs().max(1.0);
                    assert!(
                        (interp - exact).abs() / scale < 1e-9,
                        "scheme {scheme:?} degree {deg} at x={x}: {interp} vs {exact}"
                    );
                }
            }
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let grid = Grid1D::new(vec![0.0, 0.7, 1.5, 2.1, 3.0, 4.2, 5.0]).unwrap();
        let scheme = PatchScheme::new(2, 2, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let h = 1e-5;
        for _ in 0..100 {
            // Stay clear of nodes so every probe lands in the same segment.
            let seg = rng.random_range(0..grid.n_segments());
            let (a, b) = (grid.nodes()[seg], grid.nodes()[seg + 1]);
            let x = a + (b - a) * rng.random_range(0.2..0.8);
            let se = shape_eval(&grid, &scheme, x, 2).unwrap();
            let sp = shape_eval(&grid, &scheme, x + h, 0).unwrap();
            let sm = shape_eval(&grid, &scheme, x - h, 0).unwrap();
            assert_eq!(se.nodes, sp.nodes);
            assert_eq!(se.nodes, sm.nodes);
            let d2 = se.d2.as_ref().unwrap();
            for a in 0..se.nodes.len() {
                let fd1 = (sp.value[a] - sm.value[a]) / (2.0 * h);
                let fd2 = (sp.value[a] - 2.0 * se.value[a] + sm.value[a]) / (h * h);
                assert!((se.d1[a] - fd1).abs() < 1e-6 * se.d1[a].abs().max(1.0));
                assert!((d2[a] - fd2).abs() < 1e-4 * d2[a].abs().max(1.0));
            }
        }
    }

    #[test]
    fn second_derivative_rejected_for_linear_basis() {
        let grid = Grid1D::uniform(0.0, 1.0, 5).unwrap();
        let err = shape_eval(&grid, &PatchScheme::linear(), 0.3, 2).unwrap_err();
        assert!(matches!(err, Error::SecondDerivativeUnavailable(1)));
        let se = shape_eval(&grid, &PatchScheme::linear(), 0.3, 1).unwrap();
        assert!(se.d2.is_none());
        assert!((se.d1[0] + 4.0).abs() < 1e-12);
        assert!((se.d1[1] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn continuous_across_segment_boundaries() {
        let grid = Grid1D::uniform(0.0, 10.0, 11).unwrap();
        let eps = 1e-9;
        for scheme in schemes() {
            for k in 1..grid.n_nodes() - 1 {
                let xk = grid.nodes()[k];
                let left = shape_eval(&grid, &scheme, xk - eps, 0).unwrap();
                let right = shape_eval(&grid, &scheme, xk + eps, 0).unwrap();
                let dl = left.scatter_values(grid.n_nodes());
                let dr = right.scatter_values(grid.n_nodes());
                for j in 0..dl.len() {
                    assert!(
                        (dl[j] - dr[j]).abs() < 1e-6,
                        "scheme {scheme:?} jump at node {k}, shape {j}"
                    );
                }
            }
        }
    }

    #[test]
    fn dense_shape_vector() {
        let pg = ProductGrid::unit(&[2, 5]).unwrap();
        let v = shape_vector(&pg, &PatchScheme::linear(), 0, 0.25).unwrap();
        assert_eq!(v, vec![0.75, 0.25]);
        let v = shape_vector(&pg, &PatchScheme::linear(), 1, 0.0).unwrap();
        assert_eq!(v, vec![1.0, 0.0, 0.0, 0.0, 0.0]);
        let err = shape_vector(&pg, &PatchScheme::linear(), 1, 1.5).unwrap_err();
        assert!(matches!(err, Error::OutOfDomain { dim: 1, .. }));
    }
}
