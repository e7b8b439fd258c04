//! Mini-batch training of models against labeled datasets.
//!
//! Raw inputs are min-max normalized into the model's grid domain before
//! anything touches the model, so training is invariant to affine
//! pre-scaling of the data. Batch gradients are accumulated over
//! fixed-index shards merged in order, which keeps runs bitwise
//! reproducible under any thread count.

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::{Model, PointEval};
use crate::optim::{chunk_ranges, AdamState};

/// Per-dimension affine map from a source box onto a destination box
/// (the model's grid domain), clamped so roundoff at the edges cannot
/// push a point out of domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    src: Vec<(f64, f64)>,
    dst: Vec<(f64, f64)>,
}

impl Normalizer {
    pub fn from_bounds(src: &[(f64, f64)], dst: &[(f64, f64)]) -> Result<Self> {
        if src.len() != dst.len() {
            return Err(Error::InvalidBounds(format!(
                "{} source bounds vs {} destination bounds",
                src.len(),
                dst.len()
            )));
        }
        for (i, &(lo, hi)) in src.iter().enumerate() {
            if !lo.is_finite() || !hi.is_finite() || lo > hi {
                return Err(Error::InvalidBounds(format!(
                    "source dimension {i}: ({lo}, {hi})"
                )));
            }
        }
        for (i, &(lo, hi)) in dst.iter().enumerate() {
            if !(lo < hi) {
                return Err(Error::InvalidBounds(format!(
                    "destination dimension {i}: ({lo}, {hi})"
                )));
            }
        }
        Ok(Self { src: src.to_vec(), dst: dst.to_vec() })
    }

    pub fn n_dims(&self) -> usize {
        self.src.len()
    }

    /// Map a raw point into the destination box. A degenerate source
    /// dimension (lo == hi) maps to the destination midpoint.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.src)
            .zip(&self.dst)
            .map(|((&v, &(slo, shi)), &(dlo, dhi))| {
                if slo == shi {
                    0.5 * (dlo + dhi)
                } else {
                    (dlo + (v - slo) / (shi - slo) * (dhi - dlo)).clamp(dlo, dhi)
                }
            })
            .collect()
    }

    /// Map a destination-box point back to raw coordinates.
    pub fn invert(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(&self.src)
            .zip(&self.dst)
            .map(|((&v, &(slo, shi)), &(dlo, dhi))| {
                if slo == shi {
                    slo
                } else {
                    slo + (v - dlo) / (dhi - dlo) * (shi - slo)
                }
            })
            .collect()
    }

    pub fn apply_batch(&self, xs: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = Array2::zeros((xs.nrows(), xs.ncols()));
        for (k, row) in xs.rows().into_iter().enumerate() {
            let mapped = self.apply(&row.to_vec());
            for (i, v) in mapped.into_iter().enumerate() {
                out[(k, i)] = v;
            }
        }
        out
    }
}

/// Training hyperparameters. Defaults mirror the benchmark protocol:
/// lr 1e-3, batch 128, 80/20 split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Per-epoch learning-rate multiplier; 1.0 keeps it constant. ADAM with
    /// a fixed lr oscillates near an optimum at amplitude ~lr, so runs that
    /// target very small losses need decay.
    pub lr_decay: f64,
    /// Stop when the train MSE first reaches this value.
    pub stop_mse: Option<f64>,
    pub seed: u64,
    pub train_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            batch_size: 128,
            lr: 1e-3,
            lr_decay: 1.0,
            stop_mse: None,
            seed: 0,
            train_fraction: 0.8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("epochs and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "lr_decay must lie in (0, 1], got {}",
                self.lr_decay
            )));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "train_fraction must lie in (0, 1), got {}",
                self.train_fraction
            )));
        }
        if let Some(s) = self.stop_mse {
            if !(s > 0.0) {
                return Err(Error::InvalidConfig(format!("stop_mse must be positive, got {s}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    /// 1-based count of completed passes over the training set.
    pub epoch: usize,
    pub train_mse: f64,
    /// NaN when the dataset is too small to hold out a test split.
    pub test_mse: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub history: Vec<EpochStats>,
    /// Epoch at which train MSE first reached `stop_mse`, if it did.
    pub converged_epoch: Option<usize>,
    /// Map from raw data coordinates into the model domain; inference on
    /// raw inputs must go through this.
    pub normalizer: Normalizer,
}

impl TrainReport {
    /// Per-epoch losses as CSV; `test_mse` prints NaN when no holdout exists.
    pub fn history_csv(&self) -> String {
        let mut out = String::from("epoch,train_mse,test_mse\n");
        for row in &self.history {
            out.push_str(&format!(
                "{},{},{}\n",
                row.epoch,
                crate::fmt::g17(row.train_mse),
                crate::fmt::g17(row.test_mse)
            ));
        }
        out
    }
}

/// Mean of squared errors over every sample and output component, plus its
/// gradient with respect to the flat parameters.
pub fn mse_loss(
    model: &Model,
    inputs: ArrayView2<'_, f64>,
    targets: ArrayView2<'_, f64>,
) -> Result<(f64, Vec<f64>)> {
    let k = check_batch(model, inputs, targets)?;
    let l_out = model.n_outputs();
    let n_params = model.count_params();
    let denom = (k * l_out) as f64;

    let partials: Vec<Result<(f64, Vec<f64>)>> = chunk_ranges(k, 256)
        .into_par_iter()
        .map(|range| {
            let mut grad = vec![0.0; n_params];
            let mut sq = 0.0;
            let mut resid = vec![0.0; l_out];
            for r in range {
                let x = inputs.row(r).to_vec();
                let pe = PointEval::new(model.pgrid(), model.scheme(), &x, 0)?;
                let pred = model.forward_pe(&pe);
                for l in 0..l_out {
                    let d = pred[l] - targets[(r, l)];
                    resid[l] = d;
                    sq += d * d;
                }
                model.accumulate_grad_pe(&pe, &resid, 2.0 / denom, &mut grad);
            }
            Ok((sq, grad))
        })
        .collect();

    let mut loss = 0.0;
    let mut grad = vec![0.0; n_params];
    for partial in partials {
        let (sq, g) = partial?;
        loss += sq;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    Ok((loss / denom, grad))
}

/// Loss only, same convention as [`mse_loss`].
pub fn mse_value(
    model: &Model,
    inputs: ArrayView2<'_, f64>,
    targets: ArrayView2<'_, f64>,
) -> Result<f64> {
    let k = check_batch(model, inputs, targets)?;
    let l_out = model.n_outputs();
    let partials: Vec<Result<f64>> = chunk_ranges(k, 512)
        .into_par_iter()
        .map(|range| {
            let mut sq = 0.0;
            for r in range {
                let x = inputs.row(r).to_vec();
                let pred = model.forward(&x)?;
                for l in 0..l_out {
                    let d = pred[l] - targets[(r, l)];
                    sq += d * d;
                }
            }
            Ok(sq)
        })
        .collect();
    let mut total = 0.0;
    for p in partials {
        total += p?;
    }
    Ok(total / (k * l_out) as f64)
}

fn check_batch(
    model: &Model,
    inputs: ArrayView2<'_, f64>,
    targets: ArrayView2<'_, f64>,
) -> Result<usize> {
    if inputs.nrows() == 0 {
        return Err(Error::InvalidDataset("empty batch".into()));
    }
    if inputs.nrows() != targets.nrows()
        || inputs.ncols() != model.n_inputs()
        || targets.ncols() != model.n_outputs()
    {
        return Err(Error::ShapeMismatch(format!(
            "batch {}x{} -> {}x{} against model {} -> {}",
            inputs.nrows(),
            inputs.ncols(),
            targets.nrows(),
            targets.ncols(),
            model.n_inputs(),
            model.n_outputs()
        )));
    }
    Ok(inputs.nrows())
}

/// Seed-deterministic disjoint train/test index split. Test may be empty
/// only when a single sample makes a holdout impossible.
pub(crate) fn split_indices(
    n: usize,
    train_fraction: f64,
    rng: &mut ChaCha8Rng,
) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let n_train = ((n as f64 * train_fraction).round() as usize).clamp(1, n.max(2) - 1).min(n);
    let test = idx.split_off(n_train);
    (idx, test)
}

fn gather(src: ArrayView2<'_, f64>, idx: &[usize]) -> Array2<f64> {
    Array2::from_shape_fn((idx.len(), src.ncols()), |(r, c)| src[(idx[r], c)])
}

/// Shuffled mini-batch ADAM until `stop_mse` or the epoch limit.
///
/// The model is updated in place; predictions afterwards expect inputs
/// mapped through the returned normalizer. Per-epoch history records MSE
/// over the whole train and test splits.
pub fn train(model: &mut Model, dataset: &Dataset, config: &TrainConfig) -> Result<TrainReport> {
    config.validate()?;
    if dataset.n_inputs() != model.n_inputs() || dataset.n_outputs() != model.n_outputs() {
        return Err(Error::ShapeMismatch(format!(
            "dataset {} -> {} against model {} -> {}",
            dataset.n_inputs(),
            dataset.n_outputs(),
            model.n_inputs(),
            model.n_outputs()
        )));
    }
    let normalizer = Normalizer::from_bounds(dataset.bounds(), &model.pgrid().bounds())?;
    let norm_inputs = normalizer.apply_batch(dataset.inputs().view());

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (mut train_idx, test_idx) =
        split_indices(dataset.n_samples(), config.train_fraction, &mut rng);
    let train_in = gather(norm_inputs.view(), &train_idx);
    let train_tg = gather(dataset.targets().view(), &train_idx);
    let test_in = gather(norm_inputs.view(), &test_idx);
    let test_tg = gather(dataset.targets().view(), &test_idx);

    let mut params = model.params_flat();
    let mut adam = AdamState::new(params.len(), config.lr);
    let mut history = Vec::with_capacity(config.epochs);
    let mut converged_epoch = None;

    // Batches address rows of the gathered training arrays.
    let mut order: Vec<usize> = (0..train_idx.len()).collect();
    train_idx.clear();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let bi = gather(train_in.view(), batch);
            let bt = gather(train_tg.view(), batch);
            let (loss, grad) = mse_loss(model, bi.view(), bt.view())?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    msg: format!("batch loss became {loss}"),
                });
            }
            adam.step(&mut params, &grad).map_err(|e| match e {
                Error::NonFinite { what, context } => Error::Diverged {
                    epoch,
                    msg: format!("non-finite {what}{context}"),
                },
                other => other,
            })?;
            model.set_params(&params)?;
        }

        let train_mse = mse_value(model, train_in.view(), train_tg.view())?;
        if !train_mse.is_finite() {
            return Err(Error::Diverged { epoch, msg: format!("train MSE became {train_mse}") });
        }
        let test_mse = if test_idx.is_empty() {
            f64::NAN
        } else {
            mse_value(model, test_in.view(), test_tg.view())?
        };
        history.push(EpochStats { epoch, train_mse, test_mse });

        if let Some(stop) = config.stop_mse {
            if train_mse <= stop {
                converged_epoch = Some(epoch);
                break;
            }
        }
        adam.lr *= config.lr_decay;
    }

    Ok(TrainReport { history, converged_epoch, normalizer })
}

/// MSE plus per-output coefficient of determination. R² is undefined for a
/// zero-variance target column and reported as `None`.
#[derive(Debug, Clone)]
pub struct Metrics {
    pub mse: f64,
    pub r2: Vec<Option<f64>>,
}

/// Coefficient of determination of `pred` against `truth`, or `None` when
/// the truth has zero variance.
pub fn r_squared(truth: &[f64], pred: &[f64]) -> Option<f64> {
    assert_eq!(truth.len(), pred.len(), "R² needs matching lengths");
    if truth.is_empty() {
        return None;
    }
    let mean = truth.iter().sum::<f64>() / truth.len() as f64;
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for (t, p) in truth.iter().zip(pred) {
        ss_res += (p - t) * (p - t);
        ss_tot += (t - mean) * (t - mean);
    }
    if ss_tot == 0.0 {
        None
    } else {
        Some(1.0 - ss_res / ss_tot)
    }
}

pub fn metrics(model: &Model, dataset: &Dataset, normalizer: Option<&Normalizer>) -> Result<Metrics> {
    if dataset.n_inputs() != model.n_inputs() || dataset.n_outputs() != model.n_outputs() {
        return Err(Error::ShapeMismatch(format!(
            "dataset {} -> {} against model {} -> {}",
            dataset.n_inputs(),
            dataset.n_outputs(),
            model.n_inputs(),
            model.n_outputs()
        )));
    }
    let inputs = match normalizer {
        Some(n) => n.apply_batch(dataset.inputs().view()),
        None => dataset.inputs().clone(),
    };
    let preds = model.forward_batch(inputs.view())?;
    let targets = dataset.targets();
    let (k, l_out) = (dataset.n_samples(), dataset.n_outputs());

    let mut mse = 0.0;
    let mut r2 = Vec::with_capacity(l_out);
    for l in 0..l_out {
        let mean = targets.column(l).sum() / k as f64;
        let mut ss_res = 0.0;
        let mut ss_tot = 0.0;
        for r in 0..k {
            let d = preds[(r, l)] - targets[(r, l)];
            ss_res += d * d;
            let c = targets[(r, l)] - mean;
            ss_tot += c * c;
        }
        mse += ss_res;
        r2.push(if ss_tot == 0.0 { None } else { Some(1.0 - ss_res / ss_tot) });
    }
    Ok(Metrics { mse: mse / (k * l_out) as f64, r2 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::lhs_sample;
    use crate::grid::{PatchScheme, ProductGrid};
    use crate::model::{init_model, FullModel, ModelKind};
    use crate::optim::gradcheck;
    use crate::synthetic::SyntheticFn;
    use ndarray::{ArrayD, IxDyn};
    use rand::Rng;

    fn line_dataset(k: usize) -> Dataset {
        // f(x) = x sampled uniformly on [0, 1].
        let xs: Vec<f64> = (0..k).map(|i| i as f64 / (k - 1) as f64).collect();
        let inputs = Array2::from_shape_vec((k, 1), xs.clone()).unwrap();
        let targets = Array2::from_shape_vec((k, 1), xs).unwrap();
        Dataset::new(inputs, targets).unwrap()
    }

    #[test]
    fn normalizer_maps_and_inverts() {
        let n = Normalizer::from_bounds(&[(2.0, 4.0), (5.0, 5.0)], &[(0.0, 1.0), (0.0, 1.0)])
            .unwrap();
        assert_eq!(n.apply(&[3.0, 5.0]), vec![0.5, 0.5]);
        assert_eq!(n.apply(&[2.0, 5.0]), vec![0.0, 0.5]);
        // Roundoff past the edge clamps instead of leaving the domain.
        assert_eq!(n.apply(&[4.0 + 1e-12, 5.0]), vec![1.0, 0.5]);
        let back = n.invert(&[0.5, 0.5]);
        assert_eq!(back, vec![3.0, 5.0]);
        assert!(Normalizer::from_bounds(&[(0.0, 1.0)], &[(1.0, 0.0)]).is_err());
    }

    #[test]
    fn mse_loss_known_values_and_gradient() {
        let pg = ProductGrid::unit(&[6]).unwrap();
        let scheme = PatchScheme::linear();

        // A model interpolating its own samples has zero loss.
        let mut values = ArrayD::zeros(IxDyn(&[6, 1]));
        for (j, &x) in pg.dim(0).nodes().iter().enumerate() {
            values[IxDyn(&[j, 0])] = 2.0 * x + 1.0;
        }
        let m = Model::Full(FullModel::from_values(pg.clone(), scheme, values).unwrap());
        let inputs = Array2::from_shape_vec((4, 1), vec![0.1, 0.35, 0.6, 0.95]).unwrap();
        let targets = inputs.mapv(|x| 2.0 * x + 1.0);
        let (loss, _) = mse_loss(&m, inputs.view(), targets.view()).unwrap();
        assert!(loss < 1e-28, "interpolating loss {loss}");

        // Zero model against unit targets: mean of ones.
        let zero = Model::Full(FullModel::zeros(pg.clone(), scheme, 1).unwrap());
        let ones = Array2::ones((4, 1));
        let (loss, _) = mse_loss(&zero, inputs.view(), ones.view()).unwrap();
        assert!((loss - 1.0).abs() < 1e-15);

        // Gradient against finite differences.
        let mut m = init_model(&ModelKind::Cp { modes: 2 }, pg, scheme, 1, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p: Vec<f64> = (0..m.count_params()).map(|_| rng.random_range(-1.0..1.0)).collect();
        m.set_params(&p).unwrap();
        let analytic = mse_loss(&m, inputs.view(), targets.view()).unwrap().1;
        let mut probe = m.clone();
        let err = gradcheck(
            |q| {
                probe.set_params(q)?;
                Ok(mse_loss(&probe, inputs.view(), targets.view())?.0)
            },
            &p,
            &analytic,
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-5, "mse gradcheck err {err}");
    }

    #[test]
    fn training_reproduces_linear_data_exactly() {
        let pg = ProductGrid::unit(&[11]).unwrap();
        let mut model = init_model(&ModelKind::Full, pg, PatchScheme::linear(), 1, 0).unwrap();
        let dataset = line_dataset(64);
        let config = TrainConfig {
            epochs: 3000,
            batch_size: 64,
            lr: 0.05,
            lr_decay: 0.995,
            stop_mse: Some(1e-10),
            seed: 1,
            train_fraction: 0.8,
        };
        let report = train(&mut model, &dataset, &config).unwrap();
        let last = report.history.last().unwrap();
        assert!(
            report.converged_epoch.is_some(),
            "did not reach 1e-10, final train MSE {}",
            last.train_mse
        );
        assert!(last.train_mse <= 1e-10);
        assert_eq!(report.converged_epoch.unwrap(), last.epoch);
    }

    #[test]
    fn separable_function_reaches_benchmark_stop() {
        let pg = ProductGrid::unit(&[11, 11, 11]).unwrap();
        let scheme = PatchScheme::new(2, 2, 2).unwrap();
        let mut model = init_model(&ModelKind::Cp { modes: 2 }, pg, scheme, 1, 7).unwrap();
        let bounds = [(0.0, 1.0); 3];
        let dataset = lhs_sample(SyntheticFn::SeparableSin3, 2000, &bounds, 11).unwrap();
        let config = TrainConfig {
            epochs: 400,
            batch_size: 128,
            lr: 3e-3,
            stop_mse: Some(4e-4),
            seed: 2,
            ..TrainConfig::default()
        };
        let report = train(&mut model, &dataset, &config).unwrap();
        assert!(
            report.converged_epoch.is_some(),
            "no convergence; final {:?}",
            report.history.last()
        );
    }

    #[test]
    fn identical_seeds_identical_histories() {
        let run = || {
            let pg = ProductGrid::unit(&[9, 9]).unwrap();
            let mut model = init_model(
                &ModelKind::Cp { modes: 2 },
                pg,
                PatchScheme::linear(),
                1,
                13,
            )
            .unwrap();
            let bounds = [(0.0, 1.0); 2];
            let ds = lhs_sample(SyntheticFn::PolyCross2, 300, &bounds, 17).unwrap();
            let config = TrainConfig { epochs: 20, seed: 5, ..TrainConfig::default() };
            train(&mut model, &ds, &config).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.history.len(), b.history.len());
        for (x, y) in a.history.iter().zip(&b.history) {
            assert_eq!(x.train_mse.to_bits(), y.train_mse.to_bits());
            assert_eq!(x.test_mse.to_bits(), y.test_mse.to_bits());
        }
    }

    #[test]
    fn training_is_invariant_to_affine_input_scaling() {
        let bounds = [(0.0, 1.0); 2];
        let raw = lhs_sample(SyntheticFn::PolyCross2, 200, &bounds, 23).unwrap();
        // Same data with inputs mapped through x -> 3x + 5.
        let scaled_inputs = raw.inputs().mapv(|x| 3.0 * x + 5.0);
        let scaled = Dataset::with_bounds(
            scaled_inputs,
            raw.targets().clone(),
            vec![(5.0, 8.0); 2],
        )
        .unwrap();

        let config = TrainConfig { epochs: 15, seed: 3, ..TrainConfig::default() };
        let mut run = |ds: &Dataset| {
            let pg = ProductGrid::unit(&[7, 7]).unwrap();
            let mut model =
                init_model(&ModelKind::Cp { modes: 2 }, pg, PatchScheme::linear(), 1, 29)
                    .unwrap();
            train(&mut model, ds, &config).unwrap()
        };
        let a = run(&raw);
        let b = run(&scaled);
        for (x, y) in a.history.iter().zip(&b.history) {
            assert!((x.train_mse - y.train_mse).abs() <= 1e-10);
            assert!((x.test_mse - y.test_mse).abs() <= 1e-10);
        }
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let mut rng1 = ChaCha8Rng::seed_from_u64(99);
        let mut rng2 = ChaCha8Rng::seed_from_u64(99);
        let (tr1, te1) = split_indices(100, 0.8, &mut rng1);
        let (tr2, te2) = split_indices(100, 0.8, &mut rng2);
        assert_eq!(tr1, tr2);
        assert_eq!(te1, te2);
        assert_eq!(tr1.len(), 80);
        assert_eq!(te1.len(), 20);
        let mut all: Vec<usize> = tr1.iter().chain(&te1).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn full_batch_descent_is_monotone_on_linear_model() {
        // Convex quadratic: full-batch plain GD with a small step never
        // increases the loss.
        let pg = ProductGrid::unit(&[8]).unwrap();
        let mut model = init_model(&ModelKind::Full, pg, PatchScheme::linear(), 1, 0).unwrap();
        let ds = line_dataset(32);
        let inputs = ds.inputs().clone();
        let targets = ds.targets().clone();
        let mut params = model.params_flat();
        let mut prev = f64::INFINITY;
        for _ in 0..200 {
            let (loss, grad) = mse_loss(&model, inputs.view(), targets.view()).unwrap();
            assert!(loss <= prev + 1e-15, "loss rose from {prev} to {loss}");
            prev = loss;
            for (p, g) in params.iter_mut().zip(&grad) {
                *p -= 0.1 * g;
            }
            model.set_params(&params).unwrap();
        }
    }

    #[test]
    fn metrics_r2_definitions() {
        let pg = ProductGrid::unit(&[6]).unwrap();
        let ds = line_dataset(40);

        // Interpolating model: r2 = 1.
        let mut values = ArrayD::zeros(IxDyn(&[6, 1]));
        for (j, &x) in pg.dim(0).nodes().iter().enumerate() {
            values[IxDyn(&[j, 0])] = x;
        }
        let perfect =
            Model::Full(FullModel::from_values(pg.clone(), PatchScheme::linear(), values).unwrap());
        let m = metrics(&perfect, &ds, None).unwrap();
        assert!((m.r2[0].unwrap() - 1.0).abs() < 1e-12);

        // Constant model at the target mean: r2 = 0.
        let mean = ds.targets().column(0).sum() / ds.n_samples() as f64;
        let values = ArrayD::from_elem(IxDyn(&[6, 1]), mean);
        let flat =
            Model::Full(FullModel::from_values(pg.clone(), PatchScheme::linear(), values).unwrap());
        let m = metrics(&flat, &ds, None).unwrap();
        assert!(m.r2[0].unwrap().abs() < 1e-12);
        assert!((m.mse - mse_value(&flat, ds.inputs().view(), ds.targets().view()).unwrap()).abs() < 1e-15);

        // Zero-variance targets: r2 undefined.
        let inputs = Array2::from_shape_vec((3, 1), vec![0.1, 0.5, 0.9]).unwrap();
        let targets = Array2::from_elem((3, 1), 2.0);
        let constant = Dataset::new(inputs, targets).unwrap();
        let m = metrics(&flat, &constant, None).unwrap();
        assert!(m.r2[0].is_none());
    }

    #[test]
    fn divergence_is_reported_with_epoch() {
        let pg = ProductGrid::unit(&[6]).unwrap();
        let mut model = init_model(&ModelKind::Full, pg, PatchScheme::linear(), 1, 0).unwrap();
        let ds = line_dataset(16);
        let config = TrainConfig {
            epochs: 50,
            batch_size: 16,
            lr: 1e280,
            ..TrainConfig::default()
        };
        match train(&mut model, &ds, &config) {
            Err(Error::Diverged { .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
