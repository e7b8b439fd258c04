//! Manufactured 1D Poisson benchmark: -u''(x) = b(x) on [0, 10], u(0) = u(10) = 0.
//!
//! The exact solution is a pair of Gaussian bumps plus a linear correction
//! that zeroes both ends; the body force is its negated second derivative in
//! closed form. Because the solution is known, any discretization can be
//! scored with the relative H1 error, and refinement sweeps measure the
//! convergence order of a patch scheme directly.
//!
//! Two solution paths ship: a direct Galerkin assembly with a banded
//! Cholesky solve, and a gradient-descent minimization of the equivalent
//! discrete energy. They agree to solver tolerance, which is a useful
//! end-to-end check because they share nothing but the assembly.

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};
use crate::fmt::g17;
use crate::grid::{Grid1D, PatchScheme, ProductGrid};
use crate::interp::shape_eval;
use crate::model::{FullModel, Model};
use crate::solver::banded::BandedSpd;
use crate::solver::quadrature::GaussLegendre;

/// The fixed benchmark domain.
pub const DOMAIN: (f64, f64) = (0.0, 10.0);

const PI: f64 = std::f64::consts::PI;

fn check_domain(x: f64) -> Result<()> {
    if !(DOMAIN.0..=DOMAIN.1).contains(&x) {
        return Err(Error::OutOfDomain {
            dim: 0,
            value: x,
            lo: DOMAIN.0,
            hi: DOMAIN.1,
        });
    }
    Ok(())
}

/// Exact solution: two Gaussian bumps at x = 2.5 and x = 7.5, shifted and
/// tilted so that u(0) = u(10) = 0.
pub fn manufactured_u(x: f64) -> Result<f64> {
    check_domain(x)?;
    let e1 = (-PI * (x - 2.5) * (x - 2.5)).exp();
    let e2 = (-PI * (x - 7.5) * (x - 7.5)).exp();
    let c1 = (-6.25 * PI).exp();
    let c2 = (-56.25 * PI).exp();
    Ok((e1 - c1) + 2.0 * (e2 - c2) - (c1 - c2) / 10.0 * x)
}

/// Exact derivative du/dx of [`manufactured_u`].
pub fn manufactured_du(x: f64) -> Result<f64> {
    check_domain(x)?;
    let e1 = (-PI * (x - 2.5) * (x - 2.5)).exp();
    let e2 = (-PI * (x - 7.5) * (x - 7.5)).exp();
    let c1 = (-6.25 * PI).exp();
    let c2 = (-56.25 * PI).exp();
    Ok(-2.0 * PI * (x - 2.5) * e1 - 4.0 * PI * (x - 7.5) * e2 - (c1 - c2) / 10.0)
}

/// Body force b = -u'' so that u'' + b = 0 holds for [`manufactured_u`].
pub fn manufactured_b(x: f64) -> Result<f64> {
    check_domain(x)?;
    let d1 = x - 2.5;
    let d2 = x - 7.5;
    let e1 = (-PI * d1 * d1).exp();
    let e2 = (-PI * d2 * d2).exp();
    Ok(-(4.0 * PI * PI * d1 * d1 - 2.0 * PI) * e1 - (8.0 * PI * PI * d2 * d2 - 4.0 * PI) * e2)
}

/// Assemble the interior stiffness system K u = f for -u'' = b with
/// homogeneous Dirichlet ends eliminated. Returns the banded matrix over
/// interior nodes and the matching load vector.
pub(crate) fn assemble(
    grid: &Grid1D,
    scheme: &PatchScheme,
    n_quad: usize,
    body: &dyn Fn(f64) -> f64,
) -> Result<(BandedSpd, Vec<f64>)> {
    let required = scheme.poly_order + 1;
    if n_quad < required {
        return Err(Error::QuadratureOrder {
            got: n_quad,
            required,
        });
    }
    let n_nodes = grid.n_nodes();
    if n_nodes < 3 {
        return Err(Error::InvalidGrid(
            "assembly needs at least one interior node".into(),
        ));
    }
    let mut hw = 0usize;
    for seg in 0..grid.n_segments() {
        let patch = grid.patch_nodes(seg, scheme)?;
        hw = hw.max(patch[patch.len() - 1] - patch[0]);
    }
    let n_free = n_nodes - 2;
    let mut k = BandedSpd::zeros(n_free, hw);
    let mut f = vec![0.0; n_free];
    let rule = GaussLegendre::new(n_quad)?;
    let nodes = grid.nodes();
    // End nodes carry the (zero) Dirichlet data; interior node g maps to
    // equation g - 1.
    let free = |g: usize| -> Option<usize> {
        (g > 0 && g < n_nodes - 1).then(|| g - 1)
    };
    for seg in 0..grid.n_segments() {
        for (xq, wq) in rule.mapped(nodes[seg], nodes[seg + 1]) {
            let se = shape_eval(grid, scheme, xq, 1)?;
            let bx = body(xq);
            for (a, &ga) in se.nodes.iter().enumerate() {
                let Some(ia) = free(ga) else { continue };
                f[ia] += wq * se.value[a] * bx;
                for (b, &gb) in se.nodes.iter().enumerate().take(a + 1) {
                    let Some(ib) = free(gb) else { continue };
                    k.add(ia, ib, wq * se.d1[a] * se.d1[b]);
                }
            }
        }
    }
    Ok((k, f))
}

fn nodal_model(grid: &Grid1D, scheme: &PatchScheme, interior: &[f64]) -> Result<Model> {
    let n_nodes = grid.n_nodes();
    let mut values = ArrayD::zeros(IxDyn(&[n_nodes, 1]));
    for (i, &v) in interior.iter().enumerate() {
        values[[i + 1, 0]] = v;
    }
    let pgrid = ProductGrid::new(vec![grid.clone()])?;
    Ok(Model::Full(FullModel::from_values(pgrid, *scheme, values)?))
}

fn check_benchmark_domain(grid: &Grid1D) -> Result<()> {
    if grid.lo() != DOMAIN.0 || grid.hi() != DOMAIN.1 {
        return Err(Error::InvalidGrid(format!(
            "benchmark grid must span [{}, {}], got [{}, {}]",
            DOMAIN.0,
            DOMAIN.1,
            grid.lo(),
            grid.hi()
        )));
    }
    Ok(())
}

/// Galerkin solve of -u'' = b with an arbitrary body force and zero ends.
pub(crate) fn solve_with(
    grid: &Grid1D,
    scheme: &PatchScheme,
    n_quad: usize,
    body: &dyn Fn(f64) -> f64,
) -> Result<Model> {
    let (k, f) = assemble(grid, scheme, n_quad, body)?;
    let u = k.cholesky()?.solve(&f)?;
    nodal_model(grid, scheme, &u)
}

/// Direct Galerkin solve of the manufactured benchmark on `grid`.
///
/// Uses Gauss-Legendre quadrature with `n_quad` points per segment
/// (`n_quad >= P + 1` required), strong elimination of the end nodes, and a
/// banded Cholesky solve. The result is a full nodal model with one output.
pub fn solve_poisson_galerkin(
    grid: &Grid1D,
    scheme: &PatchScheme,
    n_quad: usize,
) -> Result<Model> {
    check_benchmark_domain(grid)?;
    solve_with(grid, scheme, n_quad, &|x| {
        manufactured_b(x).expect("quadrature points stay inside the domain")
    })
}

/// Settings for the energy-minimization solve.
#[derive(Debug, Clone)]
pub struct EnergyConfig {
    /// Gradient-descent iteration cap.
    pub max_iters: usize,
    /// Residual tolerance relative to the load scale.
    pub tol: f64,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        Self {
            max_iters: 2_000_000,
            tol: 1e-11,
        }
    }
}

/// Solve the manufactured benchmark by minimizing the discrete energy
/// E(u) = u'Ku/2 - u'f with plain gradient descent.
///
/// The step 1/bound(K) keeps the iteration monotone on the convex quadratic,
/// so this must land on the same minimum as [`solve_poisson_galerkin`]; the
/// two paths agreeing is an end-to-end assembly check.
pub fn solve_poisson_energy(
    grid: &Grid1D,
    scheme: &PatchScheme,
    n_quad: usize,
    config: &EnergyConfig,
) -> Result<Model> {
    check_benchmark_domain(grid)?;
    let (k, f) = assemble(grid, scheme, n_quad, &|x| {
        manufactured_b(x).expect("quadrature points stay inside the domain")
    })?;
    let step = 1.0 / k.gershgorin_bound();
    let f_scale = f.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut u = vec![0.0; f.len()];
    let mut converged = false;
    for iter in 0..config.max_iters {
        let ku = k.matvec(&u);
        let mut r_max = 0.0f64;
        for i in 0..u.len() {
            let r = f[i] - ku[i];
            r_max = r_max.max(r.abs());
            u[i] += step * r;
        }
        if !r_max.is_finite() {
            return Err(Error::Diverged {
                epoch: iter,
                msg: "energy residual became non-finite".into(),
            });
        }
        if r_max <= config.tol * (1.0 + f_scale) {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Diverged {
            epoch: config.max_iters,
            msg: format!(
                "energy descent did not reach tolerance {} within {} iterations",
                config.tol, config.max_iters
            ),
        });
    }
    nodal_model(grid, scheme, &u)
}

/// Relative H1 error of a 1D single-output model against a known solution:
/// sqrt of (integral of (u - u_h)^2 + (u' - u_h')^2) over (integral of
/// u^2 + u'^2), quadrature with `n_quad` points per segment.
pub fn h1_error(
    model: &Model,
    exact: impl Fn(f64) -> f64,
    exact_du: impl Fn(f64) -> f64,
    n_quad: usize,
) -> Result<f64> {
    if model.n_inputs() != 1 || model.n_outputs() != 1 {
        return Err(Error::ShapeMismatch(format!(
            "H1 error needs a 1-input 1-output model, got {} inputs and {} outputs",
            model.n_inputs(),
            model.n_outputs()
        )));
    }
    let required = model.scheme().poly_order + 1;
    if n_quad < required {
        return Err(Error::QuadratureOrder {
            got: n_quad,
            required,
        });
    }
    let rule = GaussLegendre::new(n_quad)?;
    let grid = model.pgrid().dim(0);
    let nodes = grid.nodes();
    let mut num = 0.0;
    let mut den = 0.0;
    for seg in 0..grid.n_segments() {
        for (xq, wq) in rule.mapped(nodes[seg], nodes[seg + 1]) {
            let u = exact(xq);
            let du = exact_du(xq);
            let uh = model.forward(&[xq])?[0];
            let duh = model.grad_input(&[xq])?[[0, 0]];
            num += wq * ((u - uh) * (u - uh) + (du - duh) * (du - duh));
            den += wq * (u * u + du * du);
        }
    }
    if den <= 0.0 {
        return Err(Error::InvalidConfig(
            "H1 denominator is zero: the exact solution vanishes on the domain".into(),
        ));
    }
    Ok((num / den).sqrt())
}

/// One refinement level of a convergence sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvergenceRow {
    pub n_nodes: usize,
    /// Free unknowns after boundary elimination.
    pub dof: usize,
    pub h1_error: f64,
}

/// Refinement sweep results with the fitted log-log slope.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceReport {
    pub rows: Vec<ConvergenceRow>,
    /// Least-squares slope of log(h1_error) against log(dof).
    pub slope: f64,
}

impl ConvergenceReport {
    /// CSV with one row per refinement level; the fitted slope is repeated
    /// in the last column so a single row carries the full result.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("n_nodes,dof,h1_error,slope\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                row.n_nodes,
                row.dof,
                g17(row.h1_error),
                g17(self.slope)
            ));
        }
        out
    }
}

/// Solve the manufactured benchmark at each node count and fit the
/// convergence slope of the H1 error against the free unknown count.
pub fn convergence_study(scheme: &PatchScheme, node_counts: &[usize]) -> Result<ConvergenceReport> {
    if node_counts.len() < 3 {
        return Err(Error::InvalidConfig(format!(
            "convergence study needs at least 3 node counts, got {}",
            node_counts.len()
        )));
    }
    let n_quad = scheme.poly_order + 7;
    let mut rows = Vec::with_capacity(node_counts.len());
    for &n in node_counts {
        let grid = Grid1D::uniform(DOMAIN.0, DOMAIN.1, n)?;
        let model = solve_poisson_galerkin(&grid, scheme, n_quad)?;
        let err = h1_error(
            &model,
            |x| manufactured_u(x).expect("quadrature points stay inside the domain"),
            |x| manufactured_du(x).expect("quadrature points stay inside the domain"),
            n_quad,
        )?;
        if !(err > 0.0) {
            return Err(Error::NonFinite {
                what: "h1 error".into(),
                context: format!(" (non-positive at {n} nodes)"),
            });
        }
        rows.push(ConvergenceRow {
            n_nodes: n,
            dof: n - 2,
            h1_error: err,
        });
    }
    // Centered least squares for the slope of ln(err) on ln(dof).
    let xs: Vec<f64> = rows.iter().map(|r| (r.dof as f64).ln()).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.h1_error.ln()).collect();
    let xm = xs.iter().sum::<f64>() / xs.len() as f64;
    let ym = ys.iter().sum::<f64>() / ys.len() as f64;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - xm) * (y - ym)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - xm) * (x - xm)).sum();
    Ok(ConvergenceReport {
        rows,
        slope: sxy / sxx,
    })
}
