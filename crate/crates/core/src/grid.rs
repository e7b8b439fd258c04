//! One-dimensional discretizations and patch extraction.
//!
//! Every input dimension owns a strictly increasing list of nodes split into
//! segments. Interpolation over a segment is built from a *patch*: the set of
//! nearby nodes supplying the local polynomial basis. A one-hop patch is just
//! the two segment endpoints (piecewise linear); wider hops admit higher
//! polynomial orders while keeping the global number of unknowns fixed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hyperparameters controlling patch construction per segment.
///
/// `q_steps = 1` is the piecewise-linear degeneration and forces
/// `hop = 1`, `poly_order = 1`. `q_steps = 2` builds a degree-`poly_order`
/// basis from nodes within `hop` segments of the evaluation segment and
/// requires `poly_order + 1 <= 2 * hop` so interior patches always hold
/// enough nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchScheme {
    pub q_steps: usize,
    pub hop: usize,
    pub poly_order: usize,
}

impl PatchScheme {
    pub fn new(q_steps: usize, hop: usize, poly_order: usize) -> Result<Self> {
        match q_steps {
            1 => {
                if hop != 1 || poly_order != 1 {
                    return Err(Error::InvalidScheme(format!(
                        "Q=1 requires s=1 and P=1, got s={hop}, P={poly_order}"
                    )));
                }
            }
            2 => {
                if hop < 1 || poly_order < 1 {
                    return Err(Error::InvalidScheme(format!(
                        "Q=2 requires s >= 1 and P >= 1, got s={hop}, P={poly_order}"
                    )));
                }
                if poly_order + 1 > 2 * hop {
                    return Err(Error::InvalidScheme(format!(
                        "Q=2 requires P+1 <= 2s, got P={poly_order}, s={hop}"
                    )));
                }
            }
            q => {
                return Err(Error::InvalidScheme(format!(
                    "q_steps must be 1 or 2, got {q}"
                )))
            }
        }
        Ok(Self { q_steps, hop, poly_order })
    }

    /// Piecewise-linear scheme (Q=1, s=1, P=1).
    pub fn linear() -> Self {
        Self { q_steps: 1, hop: 1, poly_order: 1 }
    }

    /// Nodes per patch.
    pub fn patch_len(&self) -> usize {
        self.poly_order + 1
    }
}

/// A single dimension's discretization: strictly increasing nodes.
///
/// Segment `c` spans `[nodes[c], nodes[c+1]]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid1D {
    nodes: Vec<f64>,
}

impl Grid1D {
    /// Build from an explicit node list. Nodes must be finite, strictly
    /// increasing, and at least two.
    pub fn new(nodes: Vec<f64>) -> Result<Self> {
        if nodes.len() < 2 {
            return Err(Error::InvalidGrid(format!(
                "need at least 2 nodes, got {}",
                nodes.len()
            )));
        }
        for (i, w) in nodes.windows(2).enumerate() {
            if !w[0].is_finite() || !w[1].is_finite() {
                return Err(Error::InvalidGrid(format!("non-finite node near index {i}")));
            }
            if w[1] <= w[0] {
                return Err(Error::InvalidGrid(format!(
                    "nodes must be strictly increasing, violated at index {i}: {} >= {}",
                    w[0], w[1]
                )));
            }
        }
        Ok(Self { nodes })
    }

    /// `n_nodes` equally spaced nodes from `lo` to `hi` inclusive.
    pub fn uniform(lo: f64, hi: f64, n_nodes: usize) -> Result<Self> {
        if !(hi > lo) {
            return Err(Error::InvalidGrid(format!("hi ({hi}) must exceed lo ({lo})")));
        }
        if n_nodes < 2 {
            return Err(Error::InvalidGrid(format!("need at least 2 nodes, got {n_nodes}")));
        }
        let h = (hi - lo) / (n_nodes - 1) as f64;
        let mut nodes: Vec<f64> = (0..n_nodes).map(|i| lo + i as f64 * h).collect();
        // Pin the endpoint so the domain is exactly [lo, hi].
        *nodes.last_mut().unwrap() = hi;
        Self::new(nodes)
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_segments(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn lo(&self) -> f64 {
        self.nodes[0]
    }

    pub fn hi(&self) -> f64 {
        *self.nodes.last().unwrap()
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.lo() && x <= self.hi()
    }

    /// Segment index `c` with `nodes[c] <= x <= nodes[c+1]`.
    ///
    /// Ties at interior nodes resolve to the right-hand segment; the last
    /// node maps to the final segment.
    pub fn locate_segment(&self, x: f64) -> Result<usize> {
        if !x.is_finite() || !self.contains(x) {
            return Err(Error::OutOfDomain { dim: 0, value: x, lo: self.lo(), hi: self.hi() });
        }
        // First node strictly greater than x, minus one; the last node has
        // no such successor and falls into the final segment.
        let upper = self.nodes.partition_point(|&n| n <= x);
        Ok(upper.saturating_sub(1).min(self.n_segments() - 1))
    }

    /// Node indices supplying the interpolation basis on `segment`.
    ///
    /// For one-hop schemes these are the two segment endpoints. Otherwise the
    /// candidate window `[c-s+1, c+s]` is shifted to fit inside the grid and
    /// the `P+1` nodes nearest the segment midpoint are kept (ties go to the
    /// lower index). The result is ascending and always contains both
    /// endpoints.
    pub fn patch_nodes(&self, segment: usize, scheme: &PatchScheme) -> Result<Vec<usize>> {
        if segment >= self.n_segments() {
            return Err(Error::InvalidGrid(format!(
                "segment {segment} out of range (grid has {})",
                self.n_segments()
            )));
        }
        if scheme.q_steps == 1 {
            return Ok(vec![segment, segment + 1]);
        }

        let j = self.n_nodes() as isize;
        let c = segment as isize;
        let s = scheme.hop as isize;
        let mut lo = c - s + 1;
        let mut hi = c + s;
        if lo < 0 {
            hi -= lo;
            lo = 0;
        }
        if hi > j - 1 {
            lo -= hi - (j - 1);
            hi = j - 1;
        }
        lo = lo.max(0);

        let need = scheme.patch_len();
        let avail = (hi - lo + 1) as usize;
        if avail < need {
            return Err(Error::InvalidGrid(format!(
                "grid with {} nodes cannot supply a {need}-node patch (s={})",
                self.n_nodes(),
                scheme.hop
            )));
        }

        let mid = 0.5 * (self.nodes[segment] + self.nodes[segment + 1]);
        let mut candidates: Vec<usize> = (lo as usize..=hi as usize).collect();
        candidates.sort_by(|&a, &b| {
            let da = (self.nodes[a] - mid).abs();
            let db = (self.nodes[b] - mid).abs();
            da.partial_cmp(&db).unwrap().then(a.cmp(&b))
        });
        let mut picked: Vec<usize> = candidates[..need].to_vec();
        picked.sort_unstable();
        debug_assert!(picked.contains(&segment) && picked.contains(&(segment + 1)));
        Ok(picked)
    }
}

/// Tensor-product discretization: one [`Grid1D`] per input dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProductGrid {
    dims: Vec<Grid1D>,
}

impl ProductGrid {
    pub fn new(dims: Vec<Grid1D>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::InvalidGrid("need at least one dimension".into()));
        }
        Ok(Self { dims })
    }

    /// Unit-box grid with `counts[i]` uniform nodes per dimension.
    pub fn unit(counts: &[usize]) -> Result<Self> {
        Self::new(
            counts
                .iter()
                .map(|&n| Grid1D::uniform(0.0, 1.0, n))
                .collect::<Result<Vec<_>>>()?,
        )
    }

    pub fn n_inputs(&self) -> usize {
        self.dims.len()
    }

    pub fn dim(&self, i: usize) -> &Grid1D {
        &self.dims[i]
    }

    pub fn dims(&self) -> &[Grid1D] {
        &self.dims
    }

    pub fn node_counts(&self) -> Vec<usize> {
        self.dims.iter().map(|g| g.n_nodes()).collect()
    }

    pub fn bounds(&self) -> Vec<(f64, f64)> {
        self.dims.iter().map(|g| (g.lo(), g.hi())).collect()
    }

    /// Verify `x` lies inside the product domain.
    pub fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.n_inputs() {
            return Err(Error::ShapeMismatch(format!(
                "point has {} coordinates, grid has {} dimensions",
                x.len(),
                self.n_inputs()
            )));
        }
        for (i, (&xi, g)) in x.iter().zip(&self.dims).enumerate() {
            if !xi.is_finite() || !g.contains(xi) {
                return Err(Error::OutOfDomain { dim: i, value: xi, lo: g.lo(), hi: g.hi() });
            }
        }
        Ok(())
    }

    /// Componentwise clamp of `x` into the domain.
    pub fn clamp_point(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n_inputs() {
            return Err(Error::ShapeMismatch(format!(
                "point has {} coordinates, grid has {} dimensions",
                x.len(),
                self.n_inputs()
            )));
        }
        Ok(x.iter()
            .zip(&self.dims)
            .map(|(&xi, g)| xi.clamp(g.lo(), g.hi()))
            .collect())
    }
}
