//! Canonical-polyadic coupling: a sum of M separable terms. The
//! super-diagonal is fixed at one, so all scale lives in the factors.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{PatchScheme, ProductGrid};

use super::{validate_config, Deriv, PointEval};

/// Flat parameter layout: dimensions in order, each factor block
/// M × J_i × L row-major.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CpModel {
    pub(crate) pgrid: ProductGrid,
    pub(crate) scheme: PatchScheme,
    /// Shared mode count M.
    pub(crate) modes: usize,
    pub(crate) n_outputs: usize,
    /// factors[i]: M × J_i × L.
    pub(crate) factors: Vec<Array3<f64>>,
}

impl CpModel {
    pub fn zeros(
        pgrid: ProductGrid,
        scheme: PatchScheme,
        modes: usize,
        n_outputs: usize,
    ) -> Result<Self> {
        validate_config(&pgrid, &scheme)?;
        if modes == 0 {
            return Err(Error::InvalidModel("CP mode count must be at least 1".into()));
        }
        if n_outputs == 0 {
            return Err(Error::InvalidModel("need at least one output".into()));
        }
        let factors = pgrid
            .node_counts()
            .iter()
            .map(|&j| Array3::zeros((modes, j, n_outputs)))
            .collect();
        Ok(Self { pgrid, scheme, modes, n_outputs, factors })
    }

    /// Pseudo-random initialization; factors draw in dimension order,
    /// row-major within each block, so a seed reproduces parameters bitwise.
    pub fn init(
        pgrid: ProductGrid,
        scheme: PatchScheme,
        modes: usize,
        n_outputs: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut model = Self::zeros(pgrid, scheme, modes, n_outputs)?;
        let i_dims = model.pgrid.n_inputs() as f64;
        let bound = 0.1 / (modes as f64).powf(1.0 / i_dims);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for f in &mut model.factors {
            for v in f.as_slice_mut().expect("standard layout") {
                *v = rng.random_range(-bound..bound);
            }
        }
        Ok(model)
    }

    /// Assemble from explicit factor blocks (shape-checked).
    pub fn from_factors(
        pgrid: ProductGrid,
        scheme: PatchScheme,
        factors: Vec<Array3<f64>>,
    ) -> Result<Self> {
        validate_config(&pgrid, &scheme)?;
        if factors.len() != pgrid.n_inputs() {
            return Err(Error::ShapeMismatch(format!(
                "{} factor blocks for {} dimensions",
                factors.len(),
                pgrid.n_inputs()
            )));
        }
        let (modes, _, n_outputs) = factors[0].dim();
        if modes == 0 || n_outputs == 0 {
            return Err(Error::InvalidModel("CP factors need M >= 1 and L >= 1".into()));
        }
        for (i, f) in factors.iter().enumerate() {
            let expect = (modes, pgrid.dim(i).n_nodes(), n_outputs);
            if f.dim() != expect {
                return Err(Error::ShapeMismatch(format!(
                    "factor block {i} has shape {:?}, expected {:?}",
                    f.dim(),
                    expect
                )));
            }
        }
        let factors = factors
            .into_iter()
            .map(|f| f.as_standard_layout().into_owned())
            .collect();
        Ok(Self { pgrid, scheme, modes, n_outputs, factors })
    }

    pub fn modes(&self) -> usize {
        self.modes
    }

    pub fn factors(&self) -> &[Array3<f64>] {
        &self.factors
    }

    pub fn count_params(&self) -> usize {
        let nodes_total: usize = self.pgrid.node_counts().iter().sum();
        self.modes * self.n_outputs * nodes_total
    }

    /// Flat offset of factor block `dim`.
    pub(crate) fn dim_offset(&self, dim: usize) -> usize {
        let mut off = 0;
        for i in 0..dim {
            off += self.modes * self.pgrid.dim(i).n_nodes() * self.n_outputs;
        }
        off
    }

    /// Flat index of factor entry (dim, mode, node, output).
    pub(crate) fn flat_index(&self, dim: usize, m: usize, j: usize, l: usize) -> usize {
        self.dim_offset(dim) + (m * self.pgrid.dim(dim).n_nodes() + j) * self.n_outputs + l
    }

    /// Factor-times-shape-vector for one dimension: flat M × L, mode-major.
    /// `deriv` selects the basis derivative for that dimension.
    pub(crate) fn mode_matrix(&self, dim: usize, pe: &PointEval, deriv: Deriv) -> Vec<f64> {
        let f = self.factors[dim].as_slice().expect("standard layout");
        let e = &pe.evals[dim];
        let (m_modes, l_out) = (self.modes, self.n_outputs);
        let j_dim = self.pgrid.dim(dim).n_nodes();
        let mut v = vec![0.0; m_modes * l_out];
        for (a, &j) in e.nodes.iter().enumerate() {
            let c = pe.coeff(dim, a, deriv);
            if c != 0.0 {
                for m in 0..m_modes {
                    let src = (m * j_dim + j) * l_out;
                    let dst = m * l_out;
                    for l in 0..l_out {
                        v[dst + l] += c * f[src + l];
                    }
                }
            }
        }
        v
    }

    pub(crate) fn contract(&self, pe: &PointEval, deriv: Deriv) -> Vec<f64> {
        let i_dims = self.pgrid.n_inputs();
        let (m_modes, l_out) = (self.modes, self.n_outputs);
        let v: Vec<Vec<f64>> = (0..i_dims).map(|i| self.mode_matrix(i, pe, deriv)).collect();
        let mut out = vec![0.0; l_out];
        for m in 0..m_modes {
            for (l, o) in out.iter_mut().enumerate() {
                let mut w = 1.0;
                for vi in &v {
                    w *= vi[m * l_out + l];
                }
                *o += w;
            }
        }
        out
    }

    pub(crate) fn accumulate_grad(
        &self,
        pe: &PointEval,
        upstream: &[f64],
        scale: f64,
        buf: &mut [f64],
    ) {
        let i_dims = self.pgrid.n_inputs();
        let (m_modes, l_out) = (self.modes, self.n_outputs);
        let v: Vec<Vec<f64>> =
            (0..i_dims).map(|i| self.mode_matrix(i, pe, Deriv::Value)).collect();
        let offsets: Vec<usize> = (0..i_dims).map(|i| self.dim_offset(i)).collect();
        let mut pre = vec![1.0; i_dims + 1];
        let mut suf = vec![1.0; i_dims + 1];
        for m in 0..m_modes {
            for l in 0..l_out {
                let up = scale * upstream[l];
                if up == 0.0 {
                    continue;
                }
                let ml = m * l_out + l;
                pre[0] = 1.0;
                for i in 0..i_dims {
                    pre[i + 1] = pre[i] * v[i][ml];
                }
                suf[i_dims] = 1.0;
                for i in (0..i_dims).rev() {
                    suf[i] = suf[i + 1] * v[i][ml];
                }
                for i in 0..i_dims {
                    let loo = pre[i] * suf[i + 1];
                    if loo == 0.0 {
                        continue;
                    }
                    let e = &pe.evals[i];
                    let j_i = self.pgrid.dim(i).n_nodes();
                    for (a, &j) in e.nodes.iter().enumerate() {
                        buf[offsets[i] + (m * j_i + j) * l_out + l] += up * loo * e.value[a];
                    }
                }
            }
        }
    }

    pub(crate) fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.count_params());
        for f in &self.factors {
            out.extend_from_slice(f.as_slice().expect("standard layout"));
        }
        out
    }

    pub(crate) fn set_params(&mut self, flat: &[f64]) {
        let mut pos = 0usize;
        for f in &mut self.factors {
            let s = f.as_slice_mut().expect("standard layout");
            s.copy_from_slice(&flat[pos..pos + s.len()]);
            pos += s.len();
        }
        debug_assert_eq!(pos, flat.len());
    }
}
