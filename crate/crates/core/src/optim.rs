//! First-order optimizers and gradient verification.
//!
//! Everything operates on flat `f64` slices; models expose their parameters
//! in a documented flat layout, so the optimizer never needs to know the
//! structure. Updates are aborted (parameters untouched) when gradients are
//! non-finite, so a diverging run fails loudly instead of poisoning state.

use crate::error::{Error, Result};

/// Bias-corrected ADAM accumulator state.
#[derive(Debug, Clone)]
pub struct AdamState {
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    /// Fresh state with the benchmark defaults (beta1 0.9, beta2 0.999,
    /// eps 1e-8).
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self {
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn n_params(&self) -> usize {
        self.m.len()
    }

    /// One bias-corrected update in place. The step is aborted before any
    /// mutation if shapes disagree or the gradient has non-finite entries.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::ShapeMismatch(format!(
                "adam state holds {} params, got params={} grads={}",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                what: "gradient".into(),
                context: format!(" at parameter {i} (step {})", self.step + 1),
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
        Ok(())
    }
}

fn check_bounds(n: usize, bounds: &[(f64, f64)]) -> Result<()> {
    if bounds.len() != n {
        return Err(Error::InvalidBounds(format!(
            "{} bounds for {} parameters",
            bounds.len(),
            n
        )));
    }
    for (i, &(lo, hi)) in bounds.iter().enumerate() {
        if !(lo < hi) {
            return Err(Error::InvalidBounds(format!(
                "coordinate {i}: lo={lo} must be below hi={hi}"
            )));
        }
    }
    Ok(())
}

/// Clamp each parameter into its box.
pub fn clamp_to_bounds(params: &mut [f64], bounds: &[(f64, f64)]) -> Result<()> {
    check_bounds(params.len(), bounds)?;
    for (p, &(lo, hi)) in params.iter_mut().zip(bounds) {
        *p = p.clamp(lo, hi);
    }
    Ok(())
}

/// Plain gradient-descent step followed by a componentwise clamp into the
/// box. The result always satisfies the bounds exactly.
pub fn projected_step(
    params: &mut [f64],
    grads: &[f64],
    bounds: &[(f64, f64)],
    lr: f64,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} grads for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    check_bounds(params.len(), bounds)?;
    for i in 0..params.len() {
        params[i] = (params[i] - lr * grads[i]).clamp(bounds[i].0, bounds[i].1);
    }
    Ok(())
}

/// Compare an analytic gradient against central finite differences,
/// coordinate by coordinate. Returns the max absolute deviation scaled by
/// the larger of the two gradients' max magnitudes (floored to dodge 0/0).
pub fn gradcheck<F>(mut f: F, params: &[f64], analytic: &[f64], step: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if analytic.len() != params.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} gradient entries for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    let mut probe = params.to_vec();
    let mut fd = vec![0.0; params.len()];
    for i in 0..params.len() {
        probe[i] = params[i] + step;
        let fp = f(&probe)?;
        probe[i] = params[i] - step;
        let fm = f(&probe)?;
        probe[i] = params[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite {
                what: "objective".into(),
                context: format!(" while probing parameter {i}"),
            });
        }
        fd[i] = (fp - fm) / (2.0 * step);
    }
    let max_dev = fd
        .iter()
        .zip(analytic)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    let scale = fd
        .iter()
        .chain(analytic)
        .map(|g| g.abs())
        .fold(0.0f64, f64::max)
        .max(1e-12);
    Ok(max_dev / scale)
}

/// Directional variant for large parameter vectors: probes random unit
/// directions instead of every coordinate.
pub fn gradcheck_directional<F>(
    mut f: F,
    params: &[f64],
    analytic: &[f64],
    step: f64,
    n_probes: usize,
    seed: u64,
) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n = params.len();
    if analytic.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} gradient entries for {n} parameters",
            analytic.len()
        )));
    }
    let mut worst = 0.0f64;
    let mut probe = vec![0.0; n];
    for _ in 0..n_probes {
        let mut dir: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt().max(1e-300);
        dir.iter_mut().for_each(|d| *d /= norm);

        for i in 0..n {
            probe[i] = params[i] + step * dir[i];
        }
        let fp = f(&probe)?;
        for i in 0..n {
            probe[i] = params[i] - step * dir[i];
        }
        let fm = f(&probe)?;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite {
                what: "objective".into(),
                context: " while probing a direction".into(),
            });
        }
        let fd = (fp - fm) / (2.0 * step);
        let an: f64 = dir.iter().zip(analytic).map(|(d, g)| d * g).sum();
        let dev = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-12);
        worst = worst.max(dev);
    }
    Ok(worst)
}

/// Index ranges `[0,n)` split into fixed-size chunks. Splitting by index
/// (never by worker count) keeps parallel reductions deterministic: shards
/// are mapped in parallel and merged in order.
pub(crate) fn chunk_ranges(n: usize, chunk: usize) -> Vec<std::ops::Range<usize>> {
    assert!(chunk > 0);
    (0..n.div_ceil(chunk))
        .map(|c| c * chunk..((c + 1) * chunk).min(n))
        .collect()
}
