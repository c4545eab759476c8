//! Constraint functions, moment vectors and sample moment estimation.
//!
//! A basis collects the non-trivial constraint functions `h_1, ..., h_M`;
//! the normalization constraint `h_0 = 1`, `d_0 = 1` is implicit and never
//! stored. Three families are provided: plain powers `x^e` (classical
//! moments), decaying exponentials `exp(-alpha_k x)` (Laplace transform
//! values on a finite grid of transform parameters), and functions
//! tabulated on an arbitrary grid with linear interpolation in between.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quad::{QuadratureRule, SupportSpec};

/// The constraint functions `h_1, ..., h_M`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum MomentBasis {
    /// `h_k(x) = x^{e_k}` for distinct positive integer exponents.
    Powers { exponents: Vec<u32> },
    /// `h_k(x) = exp(-alpha_k x)` for strictly increasing positive rates.
    Exponentials { alphas: Vec<f64> },
    /// `h_k` tabulated on a strictly increasing grid, linearly
    /// interpolated between grid points and held constant beyond the ends.
    Tabulated {
        grid: Vec<f64>,
        values: Vec<Vec<f64>>,
    },
}

impl MomentBasis {
    pub fn powers(exponents: Vec<u32>) -> Result<Self> {
        let basis = MomentBasis::Powers { exponents };
        basis.validate()?;
        Ok(basis)
    }

    pub fn exponentials(alphas: Vec<f64>) -> Result<Self> {
        let basis = MomentBasis::Exponentials { alphas };
        basis.validate()?;
        Ok(basis)
    }

    pub fn tabulated(grid: Vec<f64>, values: Vec<Vec<f64>>) -> Result<Self> {
        let basis = MomentBasis::Tabulated { grid, values };
        basis.validate()?;
        Ok(basis)
    }

    /// Number of non-trivial constraints `M`.
    pub fn len(&self) -> usize {
        match self {
            MomentBasis::Powers { exponents } => exponents.len(),
            MomentBasis::Exponentials { alphas } => alphas.len(),
            MomentBasis::Tabulated { values, .. } => values.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Checks the family invariants.
    pub fn validate(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Config("basis needs at least one function".into()));
        }
        match self {
            MomentBasis::Powers { exponents } => {
                for (i, &e) in exponents.iter().enumerate() {
                    if e == 0 {
                        return Err(Error::Config(
                            "power exponents must be positive (h_0 = 1 is implicit)".into(),
                        ));
                    }
                    if exponents[..i].contains(&e) {
                        return Err(Error::Config(format!("duplicate exponent {e}")));
                    }
                }
            }
            MomentBasis::Exponentials { alphas } => {
                for (i, &a) in alphas.iter().enumerate() {
                    if !(a.is_finite() && a > 0.0) {
                        return Err(Error::Config(format!(
                            "exponential rates must be positive and finite, got {a}"
                        )));
                    }
                    if i > 0 && alphas[i - 1] >= a {
                        return Err(Error::Config(
                            "exponential rates must be strictly increasing".into(),
                        ));
                    }
                }
            }
            MomentBasis::Tabulated { grid, values } => {
                if grid.len() < 2 {
                    return Err(Error::Config(
                        "tabulated basis needs at least 2 grid points".into(),
                    ));
                }
                if grid.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::Config(
                        "tabulated grid must be strictly increasing".into(),
                    ));
                }
                for (k, v) in values.iter().enumerate() {
                    if v.len() != grid.len() {
                        return Err(Error::Config(format!(
                            "tabulated function {k} has {} values for {} grid points",
                            v.len(),
                            grid.len()
                        )));
                    }
                    if v.iter().any(|x| !x.is_finite()) {
                        return Err(Error::Config(format!(
                            "tabulated function {k} has non-finite values"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Evaluates `h_k(x)` into `out` (length `M`).
    pub fn eval_into(&self, x: f64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.len());
        match self {
            MomentBasis::Powers { exponents } => {
                for (o, &e) in out.iter_mut().zip(exponents) {
                    *o = x.powi(e as i32);
                }
            }
            MomentBasis::Exponentials { alphas } => {
                for (o, &a) in out.iter_mut().zip(alphas) {
                    *o = (-a * x).exp();
                }
            }
            MomentBasis::Tabulated { grid, values } => {
                for (o, v) in out.iter_mut().zip(values) {
                    *o = lerp_tabulated(grid, v, x);
                }
            }
        }
    }

    /// Evaluates the basis vector `h(x)`.
    pub fn eval(&self, x: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        self.eval_into(x, &mut out);
        out
    }

    /// Tabulates the basis on the quadrature nodes as an `n x M` matrix.
    pub fn eval_grid(&self, rule: &QuadratureRule) -> DMatrix<f64> {
        let n = rule.len();
        let m = self.len();
        let mut h = DMatrix::zeros(n, m);
        let mut buf = vec![0.0; m];
        for (i, &x) in rule.nodes().iter().enumerate() {
            self.eval_into(x, &mut buf);
            for (k, &v) in buf.iter().enumerate() {
                h[(i, k)] = v;
            }
        }
        h
    }
}

/// Piecewise-linear interpolation with constant extrapolation at the ends.
fn lerp_tabulated(grid: &[f64], values: &[f64], x: f64) -> f64 {
    if x <= grid[0] {
        return values[0];
    }
    if x >= grid[grid.len() - 1] {
        return values[values.len() - 1];
    }
    let hi = grid.partition_point(|&g| g < x);
    let lo = hi - 1;
    let t = (x - grid[lo]) / (grid[hi] - grid[lo]);
    values[lo] + t * (values[hi] - values[lo])
}

/// The target expectations `d_1, ..., d_M` (`d_0 = 1` implicit).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MomentVector(pub Vec<f64>);

impl MomentVector {
    pub fn new(d: Vec<f64>) -> Result<Self> {
        if d.iter().any(|x| !x.is_finite()) {
            return Err(Error::Input("moment vector has non-finite entries".into()));
        }
        Ok(MomentVector(d))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Necessary feasibility screen for an exponentials basis on a
    /// support contained in `[0, inf)`: each Laplace value must satisfy
    /// `0 < d_k < 1` and the sequence must decrease in the rate.
    ///
    /// This is a cheap necessary condition, not a feasibility
    /// certificate; infeasibility is otherwise diagnosed operationally by
    /// solver divergence.
    pub fn screen_feasibility(&self, basis: &MomentBasis, support: &SupportSpec) -> Result<()> {
        if self.len() != basis.len() {
            return Err(Error::Input(format!(
                "moment vector has {} entries for a basis of {} functions",
                self.len(),
                basis.len()
            )));
        }
        if let MomentBasis::Exponentials { alphas } = basis {
            if support.lower() >= 0.0 {
                for (&a, &d) in alphas.iter().zip(&self.0) {
                    if !(d > 0.0 && d < 1.0) {
                        return Err(Error::Infeasible {
                            reason: format!(
                                "Laplace value for alpha = {a} must lie in (0, 1), got {d}"
                            ),
                        });
                    }
                }
                if self.0.windows(2).any(|w| w[0] <= w[1]) {
                    return Err(Error::Infeasible {
                        reason: "Laplace values must decrease strictly in alpha".into(),
                    });
                }
            }
        }
        Ok(())
    }
}

/// An i.i.d. sample with its seed kept for provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSet {
    values: Vec<f64>,
    seed: u64,
}

impl SampleSet {
    /// Builds a sample, rejecting values outside the support instead of
    /// clamping (clamping would bias the moment estimates).
    pub fn new(values: Vec<f64>, seed: u64, support: &SupportSpec) -> Result<Self> {
        let bad: Vec<usize> = values
            .iter()
            .enumerate()
            .filter(|(_, &x)| !x.is_finite() || !support.contains(x))
            .map(|(i, _)| i)
            .collect();
        if !bad.is_empty() {
            return Err(Error::Input(format!(
                "{} sample value(s) outside the support at indices {:?}{}",
                bad.len(),
                &bad[..bad.len().min(10)],
                if bad.len() > 10 { ", ..." } else { "" }
            )));
        }
        Ok(SampleSet { values, seed })
    }

    /// Reads a one-column CSV with header `x`.
    pub fn read_csv<R: std::io::BufRead>(
        reader: R,
        seed: u64,
        support: &SupportSpec,
    ) -> Result<Self> {
        let mut values = Vec::new();
        let mut bad_rows = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            let field = line.trim();
            if lineno == 0 {
                if field != "x" {
                    return Err(Error::Input(format!(
                        "sample CSV must have header `x`, got `{field}`"
                    )));
                }
                continue;
            }
            if field.is_empty() {
                continue;
            }
            let x: f64 = field.parse().map_err(|_| {
                Error::Input(format!("row {}: cannot parse `{field}` as a number", lineno + 1))
            })?;
            if !x.is_finite() || !support.contains(x) {
                bad_rows.push(lineno + 1);
            } else {
                values.push(x);
            }
        }
        if !bad_rows.is_empty() {
            return Err(Error::Input(format!(
                "{} sample value(s) outside the support at CSV rows {:?}{}",
                bad_rows.len(),
                &bad_rows[..bad_rows.len().min(10)],
                if bad_rows.len() > 10 { ", ..." } else { "" }
            )));
        }
        SampleSet::new(values, seed, support)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Sample moments `d_hat_k = (1/N) sum_n h_k(X_n)`, the unbiased plug-in
/// estimator of the target vector.
pub fn estimate_moments(basis: &MomentBasis, sample: &SampleSet) -> Result<MomentVector> {
    if sample.is_empty() {
        return Err(Error::Input("cannot estimate moments from an empty sample".into()));
    }
    let m = basis.len();
    let mut acc = vec![0.0; m];
    let mut buf = vec![0.0; m];
    for &x in sample.values() {
        basis.eval_into(x, &mut buf);
        for (a, &v) in acc.iter_mut().zip(&buf) {
            *a += v;
        }
    }
    let n = sample.len() as f64;
    for a in &mut acc {
        *a /= n;
    }
    MomentVector::new(acc)
}

/// Unbiased (1/(N-1)) sample covariance of the vectors `h(X_n)`.
///
/// Symmetric positive semidefinite by construction. Requires `N >= 2`.
pub fn sample_covariance(basis: &MomentBasis, sample: &SampleSet) -> Result<DMatrix<f64>> {
    let n = sample.len();
    if n < 2 {
        return Err(Error::Input(format!(
            "sample covariance needs at least 2 observations, got {n}"
        )));
    }
    let m = basis.len();
    let mean = estimate_moments(basis, sample)?;
    let mut cov = DMatrix::zeros(m, m);
    let mut buf = vec![0.0; m];
    for &x in sample.values() {
        basis.eval_into(x, &mut buf);
        for j in 0..m {
            let dj = buf[j] - mean.0[j];
            for k in j..m {
                cov[(j, k)] += dj * (buf[k] - mean.0[k]);
            }
        }
    }
    let norm = 1.0 / (n as f64 - 1.0);
    for j in 0..m {
        for k in j..m {
            let v = cov[(j, k)] * norm;
            cov[(j, k)] = v;
            cov[(k, j)] = v;
        }
    }
    Ok(cov)
}
