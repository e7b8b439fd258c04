//! Trainable interpolation models over product grids.
//!
//! All three variants share the same readout: per-dimension shape vectors
//! are coupled against stored nodal information. The full variant keeps the
//! nodal tensor itself; Tucker and CP keep factored forms whose parameter
//! counts stay polynomial in the number of inputs. Every forward pass is
//! multilinear in the parameters, so parameter gradients and input
//! derivatives are closed-form; there is no autodiff graph.
//!
//! Optimizers see a model as one flat `f64` vector via [`Model::params_flat`]
//! and [`Model::set_params`]; the per-variant layout is documented on each
//! struct. Nodal coordinates are frozen: only values, cores, and factors
//! train.

mod cp;
mod full;
mod tucker;

pub use cp::CpModel;
pub use full::FullModel;
pub use tucker::TuckerModel;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{PatchScheme, ProductGrid};
use crate::interp::{shape_eval, ShapeEval};

/// Which coupling a model uses, with mode counts where applicable.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    Full,
    /// Per-dimension mode counts M_i, each in 1..=J_i.
    Tucker { modes: Vec<usize> },
    /// Shared mode count M across dimensions.
    Cp { modes: usize },
}

/// Selects which dimension (if any) is differentiated during a contraction.
#[derive(Debug, Clone, Copy)]
pub(crate) enum Deriv {
    Value,
    First(usize),
    Second(usize),
}

/// Per-dimension shape evaluations at one input point.
pub(crate) struct PointEval {
    pub evals: Vec<ShapeEval>,
}

impl PointEval {
    pub fn new(
        pgrid: &ProductGrid,
        scheme: &PatchScheme,
        x: &[f64],
        deriv_order: u8,
    ) -> Result<Self> {
        pgrid.check_point(x)?;
        let evals = x
            .iter()
            .zip(pgrid.dims())
            .map(|(&xi, g)| shape_eval(g, scheme, xi, deriv_order))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { evals })
    }

    /// Basis coefficient for patch slot `a` of dimension `dim` under `deriv`.
    #[inline]
    pub fn coeff(&self, dim: usize, a: usize, deriv: Deriv) -> f64 {
        let e = &self.evals[dim];
        match deriv {
            Deriv::First(d) if d == dim => e.d1[a],
            Deriv::Second(d) if d == dim => {
                e.d2.as_ref().expect("second derivatives were requested")[a]
            }
            _ => e.value[a],
        }
    }
}

/// Row-major iteration over a multi-index with the given extents.
pub(crate) fn for_each_multi_index(extents: &[usize], mut f: impl FnMut(&[usize])) {
    if extents.contains(&0) {
        return;
    }
    let mut idx = vec![0usize; extents.len()];
    loop {
        f(&idx);
        let mut d = extents.len();
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < extents[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

/// Re-validate a scheme and confirm every dimension can supply full patches.
pub(crate) fn validate_config(pgrid: &ProductGrid, scheme: &PatchScheme) -> Result<()> {
    let scheme = PatchScheme::new(scheme.q_steps, scheme.hop, scheme.poly_order)?;
    for i in 0..pgrid.n_inputs() {
        pgrid.dim(i).patch_nodes(0, &scheme).map_err(|e| {
            Error::InvalidModel(format!("dimension {i}: {e}"))
        })?;
    }
    Ok(())
}

/// A trainable interpolating model of any coupling.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Model {
    Full(FullModel),
    Tucker(TuckerModel),
    Cp(CpModel),
}

impl Model {
    pub fn pgrid(&self) -> &ProductGrid {
        match self {
            Model::Full(m) => &m.pgrid,
            Model::Tucker(m) => &m.pgrid,
            Model::Cp(m) => &m.pgrid,
        }
    }

    pub fn scheme(&self) -> &PatchScheme {
        match self {
            Model::Full(m) => &m.scheme,
            Model::Tucker(m) => &m.scheme,
            Model::Cp(m) => &m.scheme,
        }
    }

    pub fn n_inputs(&self) -> usize {
        self.pgrid().n_inputs()
    }

    pub fn n_outputs(&self) -> usize {
        match self {
            Model::Full(m) => m.n_outputs,
            Model::Tucker(m) => m.n_outputs,
            Model::Cp(m) => m.n_outputs,
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Full(_) => ModelKind::Full,
            Model::Tucker(m) => ModelKind::Tucker { modes: m.modes.clone() },
            Model::Cp(m) => ModelKind::Cp { modes: m.modes },
        }
    }

    /// Number of trainable scalars. Full: L·∏J_i. Tucker: L·(∏M_i + ΣM_iJ_i).
    /// CP: M·L·ΣJ_i.
    pub fn count_params(&self) -> usize {
        match self {
            Model::Full(m) => m.count_params(),
            Model::Tucker(m) => m.count_params(),
            Model::Cp(m) => m.count_params(),
        }
    }

    /// Evaluate at one point inside the domain.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let pe = PointEval::new(self.pgrid(), self.scheme(), x, 0)?;
        Ok(self.contract(&pe, Deriv::Value))
    }

    /// Evaluate after clamping each coordinate into the domain. This is the
    /// explicit opt-in for inference points that fall marginally outside;
    /// there is no extrapolation, the boundary value is returned.
    pub fn forward_clamped(&self, x: &[f64]) -> Result<Vec<f64>> {
        let clamped = self.pgrid().clamp_point(x)?;
        self.forward(&clamped)
    }

    /// Evaluate many points. Rows of `xs` are points; output row k is
    /// `forward(xs[k])`. The whole batch is validated first, so the error
    /// names the lowest offending row; evaluation itself is parallel but
    /// order-preserving.
    pub fn forward_batch(&self, xs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let n = xs.nrows();
        let l_out = self.n_outputs();
        if n == 0 {
            return Ok(Array2::zeros((0, l_out)));
        }
        let points: Vec<Vec<f64>> = xs.rows().into_iter().map(|r| r.to_vec()).collect();
        for (k, p) in points.iter().enumerate() {
            self.pgrid()
                .check_point(p)
                .map_err(|e| Error::BatchEntry { index: k, source: Box::new(e) })?;
        }
        let rows: Vec<Vec<f64>> = points
            .par_iter()
            .map(|p| self.forward(p).expect("batch points were validated"))
            .collect();
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        Ok(Array2::from_shape_vec((n, l_out), flat).expect("row lengths are n_outputs"))
    }

    /// Gradient of `dot(upstream, forward(x))` with respect to the flat
    /// parameter vector.
    pub fn grad_params(&self, x: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
        let mut buf = vec![0.0; self.count_params()];
        self.grad_params_accumulate(x, upstream, 1.0, &mut buf)?;
        Ok(buf)
    }

    /// Add `scale * d dot(upstream, forward(x)) / d params` into `buf`.
    /// Shared by loss loops that accumulate over a batch.
    pub fn grad_params_accumulate(
        &self,
        x: &[f64],
        upstream: &[f64],
        scale: f64,
        buf: &mut [f64],
    ) -> Result<()> {
        if upstream.len() != self.n_outputs() {
            return Err(Error::ShapeMismatch(format!(
                "upstream has {} entries, model has {} outputs",
                upstream.len(),
                self.n_outputs()
            )));
        }
        if buf.len() != self.count_params() {
            return Err(Error::ShapeMismatch(format!(
                "gradient buffer has {} entries, model has {} parameters",
                buf.len(),
                self.count_params()
            )));
        }
        let pe = PointEval::new(self.pgrid(), self.scheme(), x, 0)?;
        match self {
            Model::Full(m) => m.accumulate_grad(&pe, upstream, scale, buf),
            Model::Tucker(m) => m.accumulate_grad(&pe, upstream, scale, buf),
            Model::Cp(m) => m.accumulate_grad(&pe, upstream, scale, buf),
        }
        Ok(())
    }

    /// Jacobian of the outputs with respect to the inputs, shape (L, I).
    pub fn grad_input(&self, x: &[f64]) -> Result<Array2<f64>> {
        let pe = PointEval::new(self.pgrid(), self.scheme(), x, 1)?;
        let l_out = self.n_outputs();
        let i_dims = self.n_inputs();
        let mut jac = Array2::zeros((l_out, i_dims));
        for i in 0..i_dims {
            let col = self.contract(&pe, Deriv::First(i));
            for l in 0..l_out {
                jac[(l, i)] = col[l];
            }
        }
        Ok(jac)
    }

    /// Pure second partials d²u_l/dx_i², shape (L, I). Requires P >= 2.
    pub fn second_partials(&self, x: &[f64]) -> Result<Array2<f64>> {
        let pe = PointEval::new(self.pgrid(), self.scheme(), x, 2)?;
        let l_out = self.n_outputs();
        let i_dims = self.n_inputs();
        let mut out = Array2::zeros((l_out, i_dims));
        for i in 0..i_dims {
            let col = self.contract(&pe, Deriv::Second(i));
            for l in 0..l_out {
                out[(l, i)] = col[l];
            }
        }
        Ok(out)
    }

    /// Copy of the parameters in the canonical flat layout.
    pub fn params_flat(&self) -> Vec<f64> {
        match self {
            Model::Full(m) => m.params_flat(),
            Model::Tucker(m) => m.params_flat(),
            Model::Cp(m) => m.params_flat(),
        }
    }

    /// Overwrite all parameters from a flat vector (inverse of
    /// [`Model::params_flat`]).
    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.count_params() {
            return Err(Error::ShapeMismatch(format!(
                "flat vector has {} entries, model has {} parameters",
                flat.len(),
                self.count_params()
            )));
        }
        match self {
            Model::Full(m) => m.set_params(flat),
            Model::Tucker(m) => m.set_params(flat),
            Model::Cp(m) => m.set_params(flat),
        }
        Ok(())
    }

    pub(crate) fn contract(&self, pe: &PointEval, deriv: Deriv) -> Vec<f64> {
        match self {
            Model::Full(m) => m.contract(pe, deriv),
            Model::Tucker(m) => m.contract(pe, deriv),
            Model::Cp(m) => m.contract(pe, deriv),
        }
    }

    /// Forward pass reusing an existing point evaluation; lets loss loops
    /// share one shape evaluation between prediction and gradient.
    pub(crate) fn forward_pe(&self, pe: &PointEval) -> Vec<f64> {
        self.contract(pe, Deriv::Value)
    }

    /// Gradient accumulation reusing an existing point evaluation. The
    /// caller guarantees upstream/buffer lengths.
    pub(crate) fn accumulate_grad_pe(
        &self,
        pe: &PointEval,
        upstream: &[f64],
        scale: f64,
        buf: &mut [f64],
    ) {
        match self {
            Model::Full(m) => m.accumulate_grad(pe, upstream, scale, buf),
            Model::Tucker(m) => m.accumulate_grad(pe, upstream, scale, buf),
            Model::Cp(m) => m.accumulate_grad(pe, upstream, scale, buf),
        }
    }
}

/// Build a zero or pseudo-randomly initialized model.
///
/// Full models start at zero. CP and Tucker factors draw from
/// uniform(-b, b) with b = 0.1/M^(1/I); Tucker cores use the same rule with
/// M replaced by the core size ∏M_i. The same seed reproduces parameters
/// bitwise.
pub fn init_model(
    kind: &ModelKind,
    pgrid: ProductGrid,
    scheme: PatchScheme,
    n_outputs: usize,
    seed: u64,
) -> Result<Model> {
    validate_config(&pgrid, &scheme)?;
    if n_outputs == 0 {
        return Err(Error::InvalidModel("need at least one output".into()));
    }
    match kind {
        ModelKind::Full => FullModel::zeros(pgrid, scheme, n_outputs).map(Model::Full),
        ModelKind::Tucker { modes } => {
            TuckerModel::init(pgrid, scheme, modes.clone(), n_outputs, seed).map(Model::Tucker)
        }
        ModelKind::Cp { modes } => {
            CpModel::init(pgrid, scheme, *modes, n_outputs, seed).map(Model::Cp)
        }
    }
}
