//! Tucker coupling: per-output core tensors contracted against
//! per-dimension factor matrices.

use ndarray::{Array2, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{PatchScheme, ProductGrid};

use super::{for_each_multi_index, validate_config, Deriv, PointEval};

/// Flat parameter layout: the L cores in output order (each row-major over
/// M_1 × … × M_I), then factors grouped by dimension, within a dimension by
/// output, each M_i × J_i row-major.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TuckerModel {
    pub(crate) pgrid: ProductGrid,
    pub(crate) scheme: PatchScheme,
    /// Mode counts M_i, one per dimension, each in 1..=J_i.
    pub(crate) modes: Vec<usize>,
    pub(crate) n_outputs: usize,
    /// cores[l]: M_1 × … × M_I.
    pub(crate) cores: Vec<ArrayD<f64>>,
    /// factors[i][l]: M_i × J_i.
    pub(crate) factors: Vec<Vec<Array2<f64>>>,
}

impl TuckerModel {
    fn validate_modes(pgrid: &ProductGrid, modes: &[usize]) -> Result<()> {
        if modes.len() != pgrid.n_inputs() {
            return Err(Error::InvalidModel(format!(
                "{} mode counts for {} dimensions",
                modes.len(),
                pgrid.n_inputs()
            )));
        }
        for (i, &m) in modes.iter().enumerate() {
            let j = pgrid.dim(i).n_nodes();
            if m < 1 || m > j {
                return Err(Error::InvalidModel(format!(
                    "dimension {i}: modes must lie in 1..={j}, got {m}"
                )));
            }
        }
        Ok(())
    }

    /// Pseudo-random initialization; the draw order (cores by output, then
    /// factors by dimension and output, row-major within each block) is
    /// fixed so a seed reproduces parameters bitwise.
    pub fn init(
        pgrid: ProductGrid,
        scheme: PatchScheme,
        modes: Vec<usize>,
        n_outputs: usize,
        seed: u64,
    ) -> Result<Self> {
        validate_config(&pgrid, &scheme)?;
        Self::validate_modes(&pgrid, &modes)?;
        if n_outputs == 0 {
            return Err(Error::InvalidModel("need at least one output".into()));
        }
        let i_dims = pgrid.n_inputs() as f64;
        let core_size: usize = modes.iter().product();
        let core_bound = 0.1 / (core_size as f64).powf(1.0 / i_dims);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cores: Vec<ArrayD<f64>> = (0..n_outputs)
            .map(|_| {
                ArrayD::from_shape_fn(IxDyn(&modes), |_| {
                    rng.random_range(-core_bound..core_bound)
                })
            })
            .collect();
        let factors: Vec<Vec<Array2<f64>>> = (0..pgrid.n_inputs())
            .map(|i| {
                let bound = 0.1 / (modes[i] as f64).powf(1.0 / i_dims);
                let j = pgrid.dim(i).n_nodes();
                (0..n_outputs)
                    .map(|_| {
                        Array2::from_shape_fn((modes[i], j), |_| {
                            rng.random_range(-bound..bound)
                        })
                    })
                    .collect()
            })
            .collect();
        Ok(Self { pgrid, scheme, modes, n_outputs, cores, factors })
    }

    /// Assemble from explicit cores and factors (shape-checked).
    pub fn from_parts(
        pgrid: ProductGrid,
        scheme: PatchScheme,
        modes: Vec<usize>,
        cores: Vec<ArrayD<f64>>,
        factors: Vec<Vec<Array2<f64>>>,
    ) -> Result<Self> {
        validate_config(&pgrid, &scheme)?;
        Self::validate_modes(&pgrid, &modes)?;
        let n_outputs = cores.len();
        if n_outputs == 0 {
            return Err(Error::InvalidModel("need at least one output".into()));
        }
        for (l, core) in cores.iter().enumerate() {
            if core.shape() != modes.as_slice() {
                return Err(Error::ShapeMismatch(format!(
                    "core {l} has shape {:?}, expected {:?}",
                    core.shape(),
                    modes
                )));
            }
        }
        if factors.len() != pgrid.n_inputs() {
            return Err(Error::ShapeMismatch(format!(
                "{} factor groups for {} dimensions",
                factors.len(),
                pgrid.n_inputs()
            )));
        }
        for (i, group) in factors.iter().enumerate() {
            if group.len() != n_outputs {
                return Err(Error::ShapeMismatch(format!(
                    "dimension {i} has {} factor matrices, expected {n_outputs}",
                    group.len()
                )));
            }
            for (l, f) in group.iter().enumerate() {
                let expect = (modes[i], pgrid.dim(i).n_nodes());
                if f.dim() != expect {
                    return Err(Error::ShapeMismatch(format!(
                        "factor ({i},{l}) has shape {:?}, expected {:?}",
                        f.dim(),
                        expect
                    )));
                }
            }
        }
        let cores = cores
            .into_iter()
            .map(|c| c.as_standard_layout().into_owned())
            .collect();
        Ok(Self { pgrid, scheme, modes, n_outputs, cores, factors })
    }

    pub fn count_params(&self) -> usize {
        let core_size: usize = self.modes.iter().product();
        let factor_size: usize = self
            .modes
            .iter()
            .zip(self.pgrid.node_counts())
            .map(|(&m, j)| m * j)
            .sum();
        self.n_outputs * (core_size + factor_size)
    }

    fn core_size(&self) -> usize {
        self.modes.iter().product()
    }

    /// Flat offset of factor (dim, output); core blocks precede factors.
    fn factor_offset(&self, dim: usize, l: usize) -> usize {
        let mut off = self.n_outputs * self.core_size();
        for i in 0..dim {
            off += self.n_outputs * self.modes[i] * self.pgrid.dim(i).n_nodes();
        }
        off + l * self.modes[dim] * self.pgrid.dim(dim).n_nodes()
    }

    /// Factor-times-shape-vector for one dimension/output: a length-M_i
    /// mode vector. `deriv` selects the basis derivative for that dimension.
    fn mode_vector(&self, dim: usize, l: usize, pe: &PointEval, deriv: Deriv) -> Vec<f64> {
        let f = &self.factors[dim][l];
        let e = &pe.evals[dim];
        let mut t = vec![0.0; self.modes[dim]];
        for (a, &j) in e.nodes.iter().enumerate() {
            let c = pe.coeff(dim, a, deriv);
            if c != 0.0 {
                for (m, tm) in t.iter_mut().enumerate() {
                    *tm += c * f[(m, j)];
                }
            }
        }
        t
    }

    pub(crate) fn contract(&self, pe: &PointEval, deriv: Deriv) -> Vec<f64> {
        let i_dims = self.pgrid.n_inputs();
        let mut out = vec![0.0; self.n_outputs];
        for (l, o) in out.iter_mut().enumerate() {
            let t: Vec<Vec<f64>> =
                (0..i_dims).map(|i| self.mode_vector(i, l, pe, deriv)).collect();
            let core = self.cores[l].as_slice().expect("standard layout");
            let mut flat = 0usize;
            let mut acc = 0.0;
            for_each_multi_index(&self.modes, |m| {
                let mut w = core[flat];
                flat += 1;
                if w != 0.0 {
                    for (i, &mi) in m.iter().enumerate() {
                        w *= t[i][mi];
                    }
                    acc += w;
                }
            });
            *o = acc;
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
        let core_size = self.core_size();
        for l in 0..self.n_outputs {
            let up = scale * upstream[l];
            if up == 0.0 {
                continue;
            }
            let t: Vec<Vec<f64>> =
                (0..i_dims).map(|i| self.mode_vector(i, l, pe, Deriv::Value)).collect();
            let core = self.cores[l].as_slice().expect("standard layout");

            // Core gradient: product of mode-vector entries per core slot.
            // Simultaneously accumulate the leave-one-out contractions that
            // the factor gradients need.
            let core_base = l * core_size;
            let mut loo: Vec<Vec<f64>> = self.modes.iter().map(|&m| vec![0.0; m]).collect();
            let mut flat = 0usize;
            for_each_multi_index(&self.modes, |m| {
                let mut prod = 1.0;
                for (i, &mi) in m.iter().enumerate() {
                    prod *= t[i][mi];
                }
                buf[core_base + flat] += up * prod;

                let g = core[flat];
                flat += 1;
                if g != 0.0 {
                    for i in 0..i_dims {
                        let mut w = g;
                        for (i2, &mi2) in m.iter().enumerate() {
                            if i2 != i {
                                w *= t[i2][mi2];
                            }
                        }
                        loo[i][m[i]] += w;
                    }
                }
            });

            for i in 0..i_dims {
                let e = &pe.evals[i];
                let j_i = self.pgrid.dim(i).n_nodes();
                let base = self.factor_offset(i, l);
                for (m, &lm) in loo[i].iter().enumerate() {
                    if lm == 0.0 {
                        continue;
                    }
                    for (a, &j) in e.nodes.iter().enumerate() {
                        buf[base + m * j_i + j] += up * lm * e.value[a];
                    }
                }
            }
        }
    }

    pub(crate) fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.count_params());
        for core in &self.cores {
            out.extend_from_slice(core.as_slice().expect("standard layout"));
        }
        for group in &self.factors {
            for f in group {
                out.extend_from_slice(f.as_slice().expect("standard layout"));
            }
        }
        out
    }

    pub(crate) fn set_params(&mut self, flat: &[f64]) {
        let mut pos = 0usize;
        for core in &mut self.cores {
            let s = core.as_slice_mut().expect("standard layout");
            s.copy_from_slice(&flat[pos..pos + s.len()]);
            pos += s.len();
        }
        for group in &mut self.factors {
            for f in group {
                let s = f.as_slice_mut().expect("standard layout");
                s.copy_from_slice(&flat[pos..pos + s.len()]);
                pos += s.len();
            }
        }
        debug_assert_eq!(pos, flat.len());
    }
}
