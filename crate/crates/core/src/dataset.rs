//! Labeled datasets: CSV ingestion, Latin hypercube sampling, and the
//! bounds metadata used for input normalization.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fmt::g17;
use crate::synthetic::SyntheticFn;

/// K labeled samples: inputs K × I, targets K × L, plus the per-dimension
/// input box the samples came from (used to normalize into model domains).
#[derive(Debug, Clone)]
pub struct Dataset {
    inputs: Array2<f64>,
    targets: Array2<f64>,
    bounds: Vec<(f64, f64)>,
}

impl Dataset {
    /// Bundle inputs and targets; bounds become the columnwise min/max.
    pub fn new(inputs: Array2<f64>, targets: Array2<f64>) -> Result<Self> {
        let bounds = (0..inputs.ncols())
            .map(|i| {
                let col = inputs.column(i);
                let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                (lo, hi)
            })
            .collect();
        Self::with_bounds(inputs, targets, bounds)
    }

    /// Bundle with an explicit sampling box (must contain every input).
    pub fn with_bounds(
        inputs: Array2<f64>,
        targets: Array2<f64>,
        bounds: Vec<(f64, f64)>,
    ) -> Result<Self> {
        if inputs.nrows() == 0 {
            return Err(Error::InvalidDataset("need at least one sample".into()));
        }
        if inputs.ncols() == 0 || targets.ncols() == 0 {
            return Err(Error::InvalidDataset(
                "need at least one input and one target column".into(),
            ));
        }
        if inputs.nrows() != targets.nrows() {
            return Err(Error::InvalidDataset(format!(
                "{} input rows vs {} target rows",
                inputs.nrows(),
                targets.nrows()
            )));
        }
        if bounds.len() != inputs.ncols() {
            return Err(Error::InvalidDataset(format!(
                "{} bounds for {} input columns",
                bounds.len(),
                inputs.ncols()
            )));
        }
        if inputs.iter().chain(targets.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidDataset("non-finite entry".into()));
        }
        for (i, &(lo, hi)) in bounds.iter().enumerate() {
            if !(lo <= hi) {
                return Err(Error::InvalidDataset(format!(
                    "column {i}: bounds ({lo}, {hi}) are not ordered"
                )));
            }
            if inputs.column(i).iter().any(|&v| v < lo || v > hi) {
                return Err(Error::InvalidDataset(format!(
                    "column {i}: input outside bounds ({lo}, {hi})"
                )));
            }
        }
        Ok(Self { inputs, targets, bounds })
    }

    pub fn inputs(&self) -> &Array2<f64> {
        &self.inputs
    }

    pub fn targets(&self) -> &Array2<f64> {
        &self.targets
    }

    pub fn bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }

    pub fn n_samples(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn n_inputs(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn n_outputs(&self) -> usize {
        self.targets.ncols()
    }

    /// Write as CSV with an `x1..xI,u1..uL` header. Values print at 17
    /// significant digits, so a read-back is bitwise faithful.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        let header: Vec<String> = (1..=self.n_inputs())
            .map(|i| format!("x{i}"))
            .chain((1..=self.n_outputs()).map(|l| format!("u{l}")))
            .collect();
        writeln!(f, "{}", header.join(","))?;
        for k in 0..self.n_samples() {
            let row: Vec<String> = self
                .inputs
                .row(k)
                .iter()
                .chain(self.targets.row(k).iter())
                .map(|&v| g17(v))
                .collect();
            writeln!(f, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Parse a CSV with header `x1..xI,u1..uL` and a numeric body. Errors carry
/// the 1-based line number of the first offending line.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let display = path.display().to_string();
    let parse_err = |line: usize, msg: String| Error::CsvParse {
        path: display.clone(),
        line,
        msg,
    };
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut lines = reader.lines().enumerate();

    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(1, "empty file".into()))?;
    let header = header?;
    let cols: Vec<&str> = header.trim().split(',').map(str::trim).collect();
    let n_inputs = cols.iter().take_while(|c| c.starts_with('x')).count();
    let n_outputs = cols.len() - n_inputs;
    if n_inputs == 0 {
        return Err(parse_err(1, "no input columns (expected x1, x2, ...)".into()));
    }
    if n_outputs == 0 {
        return Err(parse_err(1, "no target columns (expected u1, u2, ...)".into()));
    }
    for (i, c) in cols.iter().enumerate() {
        let expect = if i < n_inputs {
            format!("x{}", i + 1)
        } else {
            format!("u{}", i - n_inputs + 1)
        };
        if *c != expect {
            return Err(parse_err(1, format!("column {} is '{c}', expected '{expect}'", i + 1)));
        }
    }

    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    let mut n_rows = 0usize;
    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            return Err(parse_err(line_no, "blank line".into()));
        }
        let cells: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        if cells.len() != cols.len() {
            return Err(parse_err(
                line_no,
                format!("{} cells, expected {}", cells.len(), cols.len()),
            ));
        }
        for (i, cell) in cells.iter().enumerate() {
            let v: f64 = cell
                .parse()
                .map_err(|_| parse_err(line_no, format!("cell {}: '{cell}' is not numeric", i + 1)))?;
            if !v.is_finite() {
                return Err(parse_err(line_no, format!("cell {}: non-finite value", i + 1)));
            }
            if i < n_inputs {
                inputs.push(v);
            } else {
                targets.push(v);
            }
        }
        n_rows += 1;
    }
    if n_rows == 0 {
        return Err(parse_err(2, "no data rows".into()));
    }
    Dataset::new(
        Array2::from_shape_vec((n_rows, n_inputs), inputs).expect("row-major fill"),
        Array2::from_shape_vec((n_rows, n_outputs), targets).expect("row-major fill"),
    )
}

/// Latin hypercube design over `bounds`, labeled through `func`. Each
/// dimension's samples occupy all n strata exactly once, in a seeded random
/// permutation with a random offset inside each stratum.
pub fn lhs_sample(
    func: SyntheticFn,
    n: usize,
    bounds: &[(f64, f64)],
    seed: u64,
) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidDataset("need at least one sample".into()));
    }
    if bounds.len() != func.n_inputs() {
        return Err(Error::InvalidDataset(format!(
            "{} bounds for {}-input function {}",
            bounds.len(),
            func.n_inputs(),
            func.id()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let i_dims = bounds.len();
    let mut inputs = Array2::zeros((n, i_dims));
    for (i, &(lo, hi)) in bounds.iter().enumerate() {
        if !(lo < hi) {
            return Err(Error::InvalidBounds(format!(
                "dimension {i}: lo={lo} must be below hi={hi}"
            )));
        }
        let mut strata: Vec<usize> = (0..n).collect();
        strata.shuffle(&mut rng);
        for (k, &s) in strata.iter().enumerate() {
            let u: f64 = rng.random_range(0.0..1.0);
            let frac = (s as f64 + u) / n as f64;
            inputs[(k, i)] = lo + frac * (hi - lo);
        }
    }
    let mut targets = Array2::zeros((n, func.n_outputs()));
    for k in 0..n {
        let row = inputs.row(k);
        let y = func.eval(row.as_slice().expect("standard layout"))?;
        for (l, v) in y.into_iter().enumerate() {
            targets[(k, l)] = v;
        }
    }
    Dataset::with_bounds(inputs, targets, bounds.to_vec())
}
