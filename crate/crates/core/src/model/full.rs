//! Full nodal tensor: one trainable value per grid node per output.

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{PatchScheme, ProductGrid};

use super::{for_each_multi_index, validate_config, Deriv, PointEval};

/// Flat parameter layout: the nodal tensor in row-major order, shape
/// J_1 × … × J_I × L with the output axis last.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FullModel {
    pub(crate) pgrid: ProductGrid,
    pub(crate) scheme: PatchScheme,
    pub(crate) n_outputs: usize,
    pub(crate) values: ArrayD<f64>,
}

impl FullModel {
    pub fn zeros(pgrid: ProductGrid, scheme: PatchScheme, n_outputs: usize) -> Result<Self> {
        validate_config(&pgrid, &scheme)?;
        if n_outputs == 0 {
            return Err(Error::InvalidModel("need at least one output".into()));
        }
        let mut shape = pgrid.node_counts();
        shape.push(n_outputs);
        let values = ArrayD::zeros(IxDyn(&shape));
        Ok(Self { pgrid, scheme, n_outputs, values })
    }

    /// Wrap an existing nodal tensor; the trailing axis is the output axis.
    pub fn from_values(
        pgrid: ProductGrid,
        scheme: PatchScheme,
        values: ArrayD<f64>,
    ) -> Result<Self> {
        validate_config(&pgrid, &scheme)?;
        let mut expected = pgrid.node_counts();
        if values.ndim() != expected.len() + 1 {
            return Err(Error::ShapeMismatch(format!(
                "nodal tensor has {} axes, expected {} grid axes plus outputs",
                values.ndim(),
                expected.len()
            )));
        }
        let n_outputs = values.shape()[expected.len()];
        if n_outputs == 0 {
            return Err(Error::InvalidModel("need at least one output".into()));
        }
        expected.push(n_outputs);
        if values.shape() != expected.as_slice() {
            return Err(Error::ShapeMismatch(format!(
                "nodal tensor shape {:?} does not match grid {:?}",
                values.shape(),
                expected
            )));
        }
        let values = values.as_standard_layout().into_owned();
        Ok(Self { pgrid, scheme, n_outputs, values })
    }

    pub fn values(&self) -> &ArrayD<f64> {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut ArrayD<f64> {
        &mut self.values
    }

    pub fn count_params(&self) -> usize {
        self.values.len()
    }

    /// Row-major strides of the value tensor (last axis = outputs).
    fn strides(&self) -> Vec<usize> {
        let shape = self.values.shape();
        let mut s = vec![1usize; shape.len()];
        for d in (0..shape.len() - 1).rev() {
            s[d] = s[d + 1] * shape[d + 1];
        }
        s
    }

    pub(crate) fn contract(&self, pe: &PointEval, deriv: Deriv) -> Vec<f64> {
        let l_out = self.n_outputs;
        let vals = self.values.as_slice().expect("values kept in standard layout");
        let strides = self.strides();
        let patch_sizes: Vec<usize> = pe.evals.iter().map(|e| e.nodes.len()).collect();
        let mut out = vec![0.0; l_out];
        for_each_multi_index(&patch_sizes, |combo| {
            let mut w = 1.0;
            let mut base = 0usize;
            for (d, &a) in combo.iter().enumerate() {
                w *= pe.coeff(d, a, deriv);
                base += pe.evals[d].nodes[a] * strides[d];
            }
            if w != 0.0 {
                for l in 0..l_out {
                    out[l] += w * vals[base + l];
                }
            }
        });
        out
    }

    pub(crate) fn accumulate_grad(
        &self,
        pe: &PointEval,
        upstream: &[f64],
        scale: f64,
        buf: &mut [f64],
    ) {
        let strides = self.strides();
        let patch_sizes: Vec<usize> = pe.evals.iter().map(|e| e.nodes.len()).collect();
        for_each_multi_index(&patch_sizes, |combo| {
            let mut w = scale;
            let mut base = 0usize;
            for (d, &a) in combo.iter().enumerate() {
                w *= pe.evals[d].value[a];
                base += pe.evals[d].nodes[a] * strides[d];
            }
            if w != 0.0 {
                for (l, &u) in upstream.iter().enumerate() {
                    buf[base + l] += w * u;
                }
            }
        });
    }

    pub(crate) fn params_flat(&self) -> Vec<f64> {
        self.values.as_slice().expect("standard layout").to_vec()
    }

    pub(crate) fn set_params(&mut self, flat: &[f64]) {
        self.values
            .as_slice_mut()
            .expect("standard layout")
            .copy_from_slice(flat);
    }
}
