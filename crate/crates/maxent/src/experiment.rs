//! Monte Carlo harness: draw samples, refit, and measure how the
//! reconstructed density fluctuates around the reference fit.
//!
//! The reference `f_star` is the maxent fit to the exact quadrature
//! moments of the configured true density (the limit object of the
//! estimation), not the true density itself, which need not belong to the
//! exponential family. Per replicate the harness records the estimated
//! moments, multipliers, L1 / Kullback / sup-norm errors against the
//! reference, and the residual of the first-order density-change
//! prediction; per sample size it aggregates means, quartiles, the
//! empirical variance of `sqrt(N) (f_hat(x) - f_star(x))`, CLT band
//! coverage, a Kolmogorov-Smirnov normality statistic and (optionally)
//! the Chebyshev/coverage bound checks.
//!
//! Replicates are independent given their seeds (cell seed =
//! `base + r * 10^6 + index(N)`), so they run in parallel and merge in
//! deterministic `(N, r)` order; identical configs produce bit-identical
//! results.

use nalgebra::{DMatrix, DVector};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::ContinuousCDF;

use crate::basis::{estimate_moments, MomentBasis, MomentVector, SampleSet};
use crate::divergence::dual_form_divergence;
use crate::error::{Error, Result};
use crate::quad::{QuadratureRule, SupportSpec, DEFAULT_QUAD_POINTS};
use crate::sensitivity::{chebyshev_tail, clt_sigma2_x, jacobian, matrix_rows, perturb_density};
use crate::solver::{fit, plot_grid, MaxentModel, SolverOptions};

/// Asymptotic 1% Kolmogorov-Smirnov critical constant: the test passes
/// when the statistic is below `1.63 / sqrt(R)`.
pub const KS_CRITICAL_1PCT: f64 = 1.63;

/// The sampling law of the experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueDensity {
    #[serde(flatten)]
    pub kind: TrueDensityKind,
    pub support: SupportSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrueDensityKind {
    /// Uniform on a finite interval.
    Uniform,
    /// `rate * exp(-rate (x - a))` renormalized to a finite interval.
    TruncatedExponential { rate: f64 },
    /// `exp(-(x - a))` on a half-line.
    UnitExponential,
    /// Piecewise-linear density tabulated on its own grid; zero outside
    /// the tabulated range. Must integrate to one (trapezoid rule on the
    /// tabulation grid, which is exact for the piecewise-linear object).
    GridTabulated { grid: Vec<f64>, values: Vec<f64> },
}

impl TrueDensity {
    pub fn uniform(support: SupportSpec) -> Result<Self> {
        let td = TrueDensity {
            kind: TrueDensityKind::Uniform,
            support,
        };
        td.validate()?;
        Ok(td)
    }

    pub fn truncated_exponential(support: SupportSpec, rate: f64) -> Result<Self> {
        let td = TrueDensity {
            kind: TrueDensityKind::TruncatedExponential { rate },
            support,
        };
        td.validate()?;
        Ok(td)
    }

    pub fn unit_exponential(support: SupportSpec) -> Result<Self> {
        let td = TrueDensity {
            kind: TrueDensityKind::UnitExponential,
            support,
        };
        td.validate()?;
        Ok(td)
    }

    pub fn grid_tabulated(support: SupportSpec, grid: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        let td = TrueDensity {
            kind: TrueDensityKind::GridTabulated { grid, values },
            support,
        };
        td.validate()?;
        Ok(td)
    }

    /// Checks kind/support compatibility and unit mass.
    pub fn validate(&self) -> Result<()> {
        self.support.validate()?;
        match (&self.kind, &self.support) {
            (TrueDensityKind::Uniform, SupportSpec::FiniteInterval { .. }) => Ok(()),
            (TrueDensityKind::Uniform, _) => Err(Error::Config(
                "uniform density needs a finite interval".into(),
            )),
            (
                TrueDensityKind::TruncatedExponential { rate },
                SupportSpec::FiniteInterval { .. },
            ) => {
                if !(rate.is_finite() && *rate > 0.0) {
                    return Err(Error::Config(format!(
                        "truncated exponential rate must be positive, got {rate}"
                    )));
                }
                Ok(())
            }
            (TrueDensityKind::TruncatedExponential { .. }, _) => Err(Error::Config(
                "truncated exponential needs a finite interval".into(),
            )),
            (TrueDensityKind::UnitExponential, SupportSpec::HalfLine { .. }) => Ok(()),
            (TrueDensityKind::UnitExponential, _) => Err(Error::Config(
                "unit exponential needs a half-line support".into(),
            )),
            (TrueDensityKind::GridTabulated { grid, values }, _) => {
                if grid.len() < 2 || grid.len() != values.len() {
                    return Err(Error::Config(
                        "tabulated density needs matching grid/values with >= 2 points".into(),
                    ));
                }
                if grid.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::Config(
                        "tabulated density grid must be strictly increasing".into(),
                    ));
                }
                if grid.iter().any(|&x| !self.support.contains(x)) {
                    return Err(Error::Config(
                        "tabulated density grid leaves the support".into(),
                    ));
                }
                if values.iter().any(|&v| !v.is_finite() || v < 0.0) {
                    return Err(Error::Config(
                        "tabulated density values must be finite and >= 0".into(),
                    ));
                }
                // Trapezoid mass is exact for the piecewise-linear density.
                let mass: f64 = grid
                    .windows(2)
                    .zip(values.windows(2))
                    .map(|(g, v)| 0.5 * (g[1] - g[0]) * (v[0] + v[1]))
                    .sum();
                if (mass - 1.0).abs() > 1e-10 {
                    return Err(Error::Config(format!(
                        "tabulated density mass is {mass}, expected 1 within 1e-10"
                    )));
                }
                Ok(())
            }
        }
    }

    /// Density value at `x`.
    pub fn pdf(&self, x: f64) -> f64 {
        match (&self.kind, &self.support) {
            (TrueDensityKind::Uniform, SupportSpec::FiniteInterval { a, b }) => {
                if x >= *a && x <= *b {
                    1.0 / (b - a)
                } else {
                    0.0
                }
            }
            (
                TrueDensityKind::TruncatedExponential { rate },
                SupportSpec::FiniteInterval { a, b },
            ) => {
                if x >= *a && x <= *b {
                    rate * (-rate * (x - a)).exp() / (1.0 - (-rate * (b - a)).exp())
                } else {
                    0.0
                }
            }
            (TrueDensityKind::UnitExponential, SupportSpec::HalfLine { a, .. }) => {
                if x >= *a {
                    (-(x - a)).exp()
                } else {
                    0.0
                }
            }
            (TrueDensityKind::GridTabulated { grid, values }, _) => {
                if x < grid[0] || x > grid[grid.len() - 1] {
                    return 0.0;
                }
                let hi = grid.partition_point(|&g| g < x).max(1);
                let lo = hi - 1;
                let t = (x - grid[lo]) / (grid[hi] - grid[lo]);
                values[lo] + t * (values[hi] - values[lo])
            }
            _ => 0.0,
        }
    }

    /// Exact moments `d_k = int h_k rho dm` under the quadrature rule.
    pub fn exact_moments(&self, basis: &MomentBasis, rule: &QuadratureRule) -> Result<MomentVector> {
        let h = basis.eval_grid(rule);
        let m = basis.len();
        let mut d = vec![0.0; m];
        for (i, (&x, &w)) in rule.nodes().iter().zip(rule.weights()).enumerate() {
            let p = w * self.pdf(x);
            for k in 0..m {
                d[k] += p * h[(i, k)];
            }
        }
        MomentVector::new(d)
    }

    /// Population covariance `Sigma(h) = E[(h - d)(h - d)']` under this
    /// law, by quadrature.
    pub fn covariance_of(&self, basis: &MomentBasis, rule: &QuadratureRule) -> Result<DMatrix<f64>> {
        let d = self.exact_moments(basis, rule)?;
        let h = basis.eval_grid(rule);
        let m = basis.len();
        let mut cov = DMatrix::zeros(m, m);
        for (i, (&x, &w)) in rule.nodes().iter().zip(rule.weights()).enumerate() {
            let p = w * self.pdf(x);
            for j in 0..m {
                let dj = h[(i, j)] - d.as_slice()[j];
                for k in j..m {
                    cov[(j, k)] += p * dj * (h[(i, k)] - d.as_slice()[k]);
                }
            }
        }
        for j in 0..m {
            for k in j..m {
                cov[(k, j)] = cov[(j, k)];
            }
        }
        Ok(cov)
    }
}

/// Draws `n` i.i.d. values; inverse CDF for the closed-form kinds,
/// rejection sampling for tabulated densities. Deterministic given the
/// seed.
pub fn draw_sample(density: &TrueDensity, n: usize, seed: u64) -> Result<SampleSet> {
    if n == 0 {
        return Err(Error::Input("sample size must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(n);
    match (&density.kind, &density.support) {
        (TrueDensityKind::Uniform, SupportSpec::FiniteInterval { a, b }) => {
            for _ in 0..n {
                values.push(a + (b - a) * rng.random::<f64>());
            }
        }
        (
            TrueDensityKind::TruncatedExponential { rate },
            SupportSpec::FiniteInterval { a, b },
        ) => {
            let tail = 1.0 - (-rate * (b - a)).exp();
            for _ in 0..n {
                let u = rng.random::<f64>();
                values.push(a - (1.0 - u * tail).ln() / rate);
            }
        }
        (TrueDensityKind::UnitExponential, SupportSpec::HalfLine { a, .. }) => {
            for _ in 0..n {
                let u = rng.random::<f64>();
                values.push(a - (1.0 - u).ln());
            }
        }
        (TrueDensityKind::GridTabulated { grid, values: pv }, support) => {
            draw_tabulated(&mut rng, grid, pv, support, density, n, &mut values)?;
        }
        _ => return Err(Error::Config("incompatible density/support".into())),
    }
    SampleSet::new(values, seed, &density.support)
}

/// Rejection sampler for tabulated densities: uniform envelope over the
/// tabulation range on finite intervals, exponential envelope on
/// half-lines. Aborts if the acceptance rate falls below 1e-3.
fn draw_tabulated(
    rng: &mut ChaCha8Rng,
    grid: &[f64],
    values: &[f64],
    support: &SupportSpec,
    density: &TrueDensity,
    n: usize,
    out: &mut Vec<f64>,
) -> Result<()> {
    let lo = grid[0];
    let hi = grid[grid.len() - 1];
    let mut proposals: u64 = 0;
    let check = |accepted: usize, proposals: u64| -> Result<()> {
        if proposals >= 10_000 && (accepted as f64) / (proposals as f64) < 1e-3 {
            return Err(Error::Envelope {
                rate: accepted as f64 / proposals as f64,
                proposals,
            });
        }
        Ok(())
    };
    match support {
        SupportSpec::FiniteInterval { .. } => {
            let peak = values.iter().cloned().fold(0.0f64, f64::max);
            while out.len() < n {
                proposals += 1;
                let x = lo + (hi - lo) * rng.random::<f64>();
                if rng.random::<f64>() * peak < density.pdf(x) {
                    out.push(x);
                }
                check(out.len(), proposals)?;
            }
        }
        SupportSpec::HalfLine { a, scale } => {
            // Envelope density beta e^{-beta (x - a)} with beta = 1/scale.
            // Per tabulation segment the linear density is bounded by its
            // larger endpoint and the envelope from below by its value at
            // the right end, so the ratio bound is rigorous.
            let beta = 1.0 / scale;
            let env = |x: f64| beta * (-beta * (x - a)).exp();
            let mut ratio_bound = 0.0f64;
            for (g, v) in grid.windows(2).zip(values.windows(2)) {
                let seg = v[0].max(v[1]) / env(g[1]);
                ratio_bound = ratio_bound.max(seg);
            }
            while out.len() < n {
                proposals += 1;
                let u = rng.random::<f64>();
                let x = a - scale * (1.0 - u).ln();
                if rng.random::<f64>() * ratio_bound * env(x) < density.pdf(x) {
                    out.push(x);
                }
                check(out.len(), proposals)?;
            }
        }
    }
    Ok(())
}

/// Indicator-interval functional used by the coverage bound checks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsSpec {
    /// Radius for the Chebyshev exceedance check on `||D|^{1/2}(d_hat - d)|`.
    pub chebyshev_a: f64,
    /// Indicator interval `[lo, hi]` defining `g`.
    pub band_g: (f64, f64),
    /// Radius for the coverage check on `|int g f_hat - int g f_star|`.
    pub band_a: f64,
}

/// Full experiment description. Serializable so results can echo it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub true_density: TrueDensity,
    pub basis: MomentBasis,
    /// Sample sizes, strictly increasing.
    pub n_grid: Vec<usize>,
    /// Replicates per sample size.
    pub replicates: usize,
    pub seed: u64,
    /// Density evaluation abscissas; five evenly spaced points over the
    /// support when empty.
    #[serde(default)]
    pub grid_points: Vec<f64>,
    #[serde(default)]
    pub solver: SolverOptions,
    #[serde(default = "default_quad_points")]
    pub quad_points: usize,
    /// CLT band multiplier.
    #[serde(default = "default_z")]
    pub z: f64,
    #[serde(default)]
    pub bounds: Option<BoundsSpec>,
}

fn default_quad_points() -> usize {
    DEFAULT_QUAD_POINTS
}

fn default_z() -> f64 {
    1.96
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.true_density.validate()?;
        self.basis.validate()?;
        self.solver.validate()?;
        if self.n_grid.is_empty() {
            return Err(Error::Config("n_grid must not be empty".into()));
        }
        if self.n_grid.contains(&0) {
            return Err(Error::Config("sample sizes must be positive".into()));
        }
        if self.n_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("n_grid must be strictly increasing".into()));
        }
        if self.replicates == 0 {
            return Err(Error::Config("replicates must be at least 1".into()));
        }
        if self.quad_points < 2 {
            return Err(Error::Config("quad_points must be at least 2".into()));
        }
        if self.z.is_nan() || self.z <= 0.0 {
            return Err(Error::Config("z must be positive".into()));
        }
        if let Some(b) = &self.bounds {
            if !(b.chebyshev_a > 0.0 && b.band_a > 0.0 && b.band_g.0 < b.band_g.1) {
                return Err(Error::Config("invalid bounds specification".into()));
            }
        }
        for &x in &self.grid_points {
            if !self.true_density.support.contains(x) {
                return Err(Error::Config(format!(
                    "grid point {x} lies outside the support"
                )));
            }
        }
        Ok(())
    }

    /// Evaluation grid (config points, or five evenly spaced defaults).
    pub fn evaluation_grid(&self) -> Vec<f64> {
        if self.grid_points.is_empty() {
            plot_grid(&self.true_density.support, 5)
        } else {
            self.grid_points.clone()
        }
    }

    /// Deterministic seed for the cell (sample-size index, replicate).
    pub fn cell_seed(&self, n_index: usize, replicate: usize) -> u64 {
        self.seed
            .wrapping_add(replicate as u64 * 1_000_000)
            .wrapping_add(n_index as u64)
    }
}

/// One successful replicate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicateRecord {
    pub n: usize,
    pub replicate: usize,
    pub d_hat: Vec<f64>,
    pub lambda_hat: Vec<f64>,
    /// `||f_hat - f_star||_1` over the quadrature nodes.
    pub l1_err: f64,
    /// Kullback divergence `K(f_hat, f_star)` (dual form).
    pub kl: f64,
    /// Sup-norm error over the quadrature nodes.
    pub sup_err: f64,
    /// Relative L1 residual of the first-order density-change prediction.
    pub chan1_resid: f64,
    /// Reconstructed density at the evaluation grid.
    pub f_hat_grid: Vec<f64>,
    /// `int g f_hat dm` for the bounds functional, when configured.
    pub g_hat: Option<f64>,
}

/// A replicate whose fit failed (e.g. boundary-infeasible sample moments
/// at small N); counted and excluded from aggregates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FailureRecord {
    pub n: usize,
    pub replicate: usize,
    pub reason: String,
}

/// Mean and quartiles of a metric across replicates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SummaryStats {
    pub mean: f64,
    pub p25: f64,
    pub median: f64,
    pub p75: f64,
}

impl SummaryStats {
    fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let mut sorted = values.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("metric values are finite"));
        Some(SummaryStats {
            mean,
            p25: quantile_sorted(&sorted, 0.25),
            median: quantile_sorted(&sorted, 0.5),
            p75: quantile_sorted(&sorted, 0.75),
        })
    }
}

/// Linear-interpolation quantile of a sorted slice.
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let k = p * (sorted.len() - 1) as f64;
    let lo = k.floor() as usize;
    let hi = k.ceil() as usize;
    let frac = k - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Kolmogorov-Smirnov normality check of the standardized density error
/// at one evaluation point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NormalityCheck {
    /// KS distance to the standard normal, absent when skipped.
    pub statistic: Option<f64>,
    /// 1% critical value `1.63 / sqrt(R)`.
    pub critical: f64,
    /// True when `sigma^2(x) = 0` (centered point) or too few replicates.
    pub skipped: bool,
    /// `statistic < critical`, absent when skipped.
    pub pass: Option<bool>,
}

/// Per-sample-size aggregation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateRow {
    pub n: usize,
    pub n_ok: usize,
    pub n_failed: usize,
    pub l1: Option<SummaryStats>,
    pub kl: Option<SummaryStats>,
    pub sup: Option<SummaryStats>,
    pub chan1_resid: Option<SummaryStats>,
    /// Median of `max_k |lambda_hat_k|`.
    pub lambda_abs_median: Option<f64>,
    /// Empirical variance of `sqrt(N) (f_hat(x) - f_star(x))` per grid point.
    pub var_sqrt_n: Option<Vec<f64>>,
    /// Fraction of replicates inside `f_star +- z sigma(x)/sqrt(N)` per
    /// grid point.
    pub band_coverage: Option<Vec<f64>>,
    /// KS normality checks per grid point.
    pub ks: Vec<NormalityCheck>,
}

/// Chebyshev / coverage bound validation for one sample size.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundsRow {
    pub n: usize,
    pub replicates: usize,
    pub chebyshev_a: f64,
    pub chebyshev_bound: f64,
    pub chebyshev_empirical: f64,
    /// Empirical exceedance within 3 binomial sigmas of the bound.
    pub chebyshev_ok: bool,
    pub band_a: f64,
    pub band_bound: f64,
    pub band_coverage: f64,
    /// Empirical coverage within 3 binomial sigmas of the bound.
    pub band_ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundsReport {
    pub rows: Vec<BoundsRow>,
}

/// Complete experiment output.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub reference: MaxentModel,
    pub exact_moments: Vec<f64>,
    /// Covariance of `h(X)` under the true density (row-major).
    pub sigma_h: Vec<Vec<f64>>,
    /// Jacobian `D = -C^{-1}` at the reference fit (row-major).
    pub jacobian: Vec<Vec<f64>>,
    pub grid_points: Vec<f64>,
    pub f_star_grid: Vec<f64>,
    /// Asymptotic variances `sigma^2(x)` at the grid points.
    pub sigma2_grid: Vec<f64>,
    /// `int g f_star dm` for the bounds functional, when configured.
    pub g_star: Option<f64>,
    /// `|<c_g, D c_g>|` for the bounds functional, when configured.
    pub band_coeff: Option<f64>,
    /// `tr(|D| Sigma(h))`.
    pub cheb_trace: f64,
    pub records: Vec<ReplicateRecord>,
    pub failures: Vec<FailureRecord>,
    pub aggregates: Vec<AggregateRow>,
    /// Log-log least-squares slope of the median L1 error across n_grid.
    pub l1_median_slope: Option<f64>,
    /// Log-log least-squares slope of the median Kullback divergence.
    pub kl_median_slope: Option<f64>,
}

impl ExperimentResult {
    /// Fraction of failed replicates over all cells.
    pub fn failure_rate(&self) -> f64 {
        let total = self.records.len() + self.failures.len();
        if total == 0 {
            0.0
        } else {
            self.failures.len() as f64 / total as f64
        }
    }
}

enum CellOutcome {
    Ok(ReplicateRecord),
    Failed(FailureRecord),
}

/// Runs the full experiment. Fails only if the reference fit itself
/// fails; per-replicate fit failures are recorded and excluded.
pub fn run_replicates(config: &ExperimentConfig) -> Result<ExperimentResult> {
    config.validate()?;
    let support = config.true_density.support;
    let rule = QuadratureRule::gauss_legendre(support, config.quad_points)?;
    let grid = config.evaluation_grid();

    let d = config.true_density.exact_moments(&config.basis, &rule)?;
    let reference = fit(&d, &config.basis, &support, &rule, &config.solver)?;
    let d_jac = jacobian(&reference, &rule)?;
    let sigma_h = config.true_density.covariance_of(&config.basis, &rule)?;
    let cheb_trace = ((-&d_jac) * &sigma_h).trace();

    let f_star_nodes = reference.density_on(&rule);
    let f_star_grid: Vec<f64> = grid.iter().map(|&x| reference.density(x)).collect();
    let sigma2_grid: Vec<f64> = grid
        .iter()
        .map(|&x| clt_sigma2_x(&reference, &d_jac, &sigma_h, x))
        .collect();

    // Pieces of the coverage-bound functional, when configured.
    let (g_star, band_coeff) = match &config.bounds {
        Some(b) => {
            let (lo, hi) = b.band_g;
            let g_star = rule
                .weights()
                .iter()
                .zip(rule.nodes())
                .zip(&f_star_nodes)
                .filter(|((_, &x), _)| x >= lo && x <= hi)
                .map(|((&w, _), &f)| w * f)
                .sum::<f64>();
            let c_g = indicator_coefficients(&reference, &rule, &f_star_nodes, lo, hi, &d);
            let coeff = (c_g.dot(&(&d_jac * &c_g))).abs();
            (Some(g_star), Some(coeff))
        }
        None => (None, None),
    };

    let cells: Vec<(usize, usize, usize)> = config
        .n_grid
        .iter()
        .enumerate()
        .flat_map(|(ni, &n)| (0..config.replicates).map(move |r| (ni, n, r)))
        .collect();

    let outcomes: Vec<CellOutcome> = cells
        .par_iter()
        .map(|&(ni, n, r)| {
            run_cell(
                config,
                &rule,
                &reference,
                &d_jac,
                &f_star_nodes,
                &grid,
                ni,
                n,
                r,
            )
        })
        .collect();

    let mut records = Vec::new();
    let mut failures = Vec::new();
    for outcome in outcomes {
        match outcome {
            CellOutcome::Ok(rec) => records.push(rec),
            CellOutcome::Failed(f) => failures.push(f),
        }
    }

    let aggregates = aggregate(config, &grid, &f_star_grid, &sigma2_grid, &records);
    let l1_median_slope = median_slope(&aggregates, |a| a.l1.map(|s| s.median));
    let kl_median_slope = median_slope(&aggregates, |a| a.kl.map(|s| s.median));

    Ok(ExperimentResult {
        config: config.clone(),
        reference,
        exact_moments: d.as_slice().to_vec(),
        sigma_h: matrix_rows(&sigma_h),
        jacobian: matrix_rows(&d_jac),
        grid_points: grid,
        f_star_grid,
        sigma2_grid,
        g_star,
        band_coeff,
        cheb_trace,
        records,
        failures,
        aggregates,
        l1_median_slope,
        kl_median_slope,
    })
}

/// `c_g = int h g f dm - d int g f dm` for an indicator interval, on the
/// quadrature nodes.
fn indicator_coefficients(
    model: &MaxentModel,
    rule: &QuadratureRule,
    f_nodes: &[f64],
    lo: f64,
    hi: f64,
    d: &MomentVector,
) -> DVector<f64> {
    let h = model.basis.eval_grid(rule);
    let m = model.basis.len();
    let mut hg = DVector::zeros(m);
    let mut mass = 0.0;
    for (i, (&x, &w)) in rule.nodes().iter().zip(rule.weights()).enumerate() {
        if x < lo || x > hi {
            continue;
        }
        let wf = w * f_nodes[i];
        mass += wf;
        for k in 0..m {
            hg[k] += wf * h[(i, k)];
        }
    }
    hg - mass * DVector::from_column_slice(d.as_slice())
}

#[allow(clippy::too_many_arguments)]
fn run_cell(
    config: &ExperimentConfig,
    rule: &QuadratureRule,
    reference: &MaxentModel,
    d_jac: &DMatrix<f64>,
    f_star_nodes: &[f64],
    grid: &[f64],
    n_index: usize,
    n: usize,
    replicate: usize,
) -> CellOutcome {
    let seed = config.cell_seed(n_index, replicate);
    let fail = |reason: String| {
        CellOutcome::Failed(FailureRecord {
            n,
            replicate,
            reason,
        })
    };
    let sample = match draw_sample(&config.true_density, n, seed) {
        Ok(s) => s,
        Err(e) => return fail(e.to_string()),
    };
    let d_hat = match estimate_moments(&config.basis, &sample) {
        Ok(d) => d,
        Err(e) => return fail(e.to_string()),
    };
    let model_hat = match fit(
        &d_hat,
        &config.basis,
        &config.true_density.support,
        rule,
        &config.solver,
    ) {
        Ok(m) => m,
        Err(e) => return fail(e.to_string()),
    };

    let f_hat_nodes = model_hat.density_on(rule);
    let mut l1 = 0.0;
    let mut sup: f64 = 0.0;
    let mut pred_l1_resid = 0.0;
    let mut actual_l1 = 0.0;
    let delta_d: Vec<f64> = d_hat
        .as_slice()
        .iter()
        .zip(reference.target.as_slice())
        .map(|(&a, &b)| a - b)
        .collect();
    for ((&w, &x), (&fh, &fs)) in rule
        .weights()
        .iter()
        .zip(rule.nodes())
        .zip(f_hat_nodes.iter().zip(f_star_nodes))
    {
        let diff = fh - fs;
        l1 += w * diff.abs();
        sup = sup.max(diff.abs());
        let predicted = perturb_density(reference, d_jac, &delta_d, x);
        pred_l1_resid += w * (diff - predicted).abs();
        actual_l1 += w * diff.abs();
    }
    let chan1_resid = if actual_l1 > 1e-300 {
        pred_l1_resid / actual_l1
    } else {
        0.0
    };
    let kl = dual_form_divergence(&model_hat, reference).expect("models share basis and support");
    let f_hat_grid: Vec<f64> = grid.iter().map(|&x| model_hat.density(x)).collect();
    let g_hat = config.bounds.as_ref().map(|b| {
        let (lo, hi) = b.band_g;
        rule.weights()
            .iter()
            .zip(rule.nodes())
            .zip(&f_hat_nodes)
            .filter(|((_, &x), _)| x >= lo && x <= hi)
            .map(|((&w, _), &f)| w * f)
            .sum()
    });

    CellOutcome::Ok(ReplicateRecord {
        n,
        replicate,
        d_hat: d_hat.as_slice().to_vec(),
        lambda_hat: model_hat.lambda,
        l1_err: l1,
        kl,
        sup_err: sup,
        chan1_resid,
        f_hat_grid,
        g_hat,
    })
}

fn aggregate(
    config: &ExperimentConfig,
    grid: &[f64],
    f_star_grid: &[f64],
    sigma2_grid: &[f64],
    records: &[ReplicateRecord],
) -> Vec<AggregateRow> {
    config
        .n_grid
        .iter()
        .map(|&n| {
            let rows: Vec<&ReplicateRecord> = records.iter().filter(|r| r.n == n).collect();
            let n_ok = rows.len();
            let n_failed = config.replicates - n_ok;
            let collect = |f: fn(&ReplicateRecord) -> f64| -> Vec<f64> {
                rows.iter().map(|r| f(r)).collect()
            };
            let l1 = SummaryStats::of(&collect(|r| r.l1_err));
            let kl = SummaryStats::of(&collect(|r| r.kl));
            let sup = SummaryStats::of(&collect(|r| r.sup_err));
            let chan1 = SummaryStats::of(&collect(|r| r.chan1_resid));
            let lambda_abs_median = SummaryStats::of(&collect(|r| {
                r.lambda_hat.iter().fold(0.0f64, |m, &l| m.max(l.abs()))
            }))
            .map(|s| s.median);

            let (var_sqrt_n, band_coverage) = if n_ok >= 2 {
                let sqrt_n = (n as f64).sqrt();
                let mut vars = Vec::with_capacity(grid.len());
                let mut covs = Vec::with_capacity(grid.len());
                for (j, (&fs, &s2)) in f_star_grid.iter().zip(sigma2_grid).enumerate() {
                    let errs: Vec<f64> = rows
                        .iter()
                        .map(|r| sqrt_n * (r.f_hat_grid[j] - fs))
                        .collect();
                    let mean = errs.iter().sum::<f64>() / n_ok as f64;
                    let var = errs.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>()
                        / (n_ok - 1) as f64;
                    vars.push(var);
                    let half = config.z * s2.sqrt() / sqrt_n;
                    let inside = rows
                        .iter()
                        .filter(|r| (r.f_hat_grid[j] - fs).abs() <= half)
                        .count();
                    covs.push(inside as f64 / n_ok as f64);
                }
                (Some(vars), Some(covs))
            } else {
                (None, None)
            };

            let ks = grid
                .iter()
                .enumerate()
                .map(|(j, _)| {
                    normality_check_values(
                        rows.iter().map(|r| r.f_hat_grid[j]),
                        f_star_grid[j],
                        sigma2_grid[j],
                        n,
                        n_ok,
                    )
                })
                .collect();

            AggregateRow {
                n,
                n_ok,
                n_failed,
                l1,
                kl,
                sup,
                chan1_resid: chan1,
                lambda_abs_median,
                var_sqrt_n,
                band_coverage,
                ks,
            }
        })
        .collect()
}

fn normality_check_values(
    f_hats: impl Iterator<Item = f64>,
    f_star: f64,
    sigma2: f64,
    n: usize,
    n_ok: usize,
) -> NormalityCheck {
    let critical = KS_CRITICAL_1PCT / (n_ok.max(1) as f64).sqrt();
    // sigma^2 at a centered point (h(x) = d) is zero up to rounding of
    // the quadrature moments; 1e-24 is far below any statistical scale.
    if sigma2 <= 1e-24 || n_ok < 2 {
        return NormalityCheck {
            statistic: None,
            critical,
            skipped: true,
            pass: None,
        };
    }
    let sqrt_n = (n as f64).sqrt();
    let sigma = sigma2.sqrt();
    let mut z: Vec<f64> = f_hats.map(|fh| sqrt_n * (fh - f_star) / sigma).collect();
    z.sort_by(|a, b| a.partial_cmp(b).expect("standardized errors are finite"));
    let stat = ks_distance_to_standard_normal(&z);
    NormalityCheck {
        statistic: Some(stat),
        critical,
        skipped: false,
        pass: Some(stat < critical),
    }
}

/// Two-sided KS distance between the empirical CDF of sorted values and
/// the standard normal CDF.
fn ks_distance_to_standard_normal(sorted: &[f64]) -> f64 {
    let normal = statrs::distribution::Normal::new(0.0, 1.0).expect("standard normal");
    let r = sorted.len() as f64;
    let mut d = 0.0f64;
    for (i, &z) in sorted.iter().enumerate() {
        let cdf = normal.cdf(z);
        d = d.max(((i + 1) as f64 / r - cdf).abs());
        d = d.max((cdf - i as f64 / r).abs());
    }
    d
}

/// Least-squares slope of `ln median` against `ln N`; `None` when fewer
/// than two sample sizes have data.
fn median_slope(
    aggregates: &[AggregateRow],
    metric: impl Fn(&AggregateRow) -> Option<f64>,
) -> Option<f64> {
    let pts: Vec<(f64, f64)> = aggregates
        .iter()
        .filter_map(|a| metric(a).map(|m| (a.n, m)))
        .filter(|&(_, m)| m > 0.0)
        .map(|(n, m)| ((n as f64).ln(), m.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let sx: f64 = pts.iter().map(|p| p.0).sum();
    let sy: f64 = pts.iter().map(|p| p.1).sum();
    let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
    Some((n * sxy - sx * sy) / (n * sxx - sx * sx))
}

/// Standalone normality check at one evaluation grid point, using the
/// largest sample size. Requires at least 200 successful replicates
/// there; a centered point (`sigma^2 = 0`) is skipped, not failed.
pub fn clt_normality_check(result: &ExperimentResult, grid_index: usize) -> Result<NormalityCheck> {
    if grid_index >= result.grid_points.len() {
        return Err(Error::Input(format!(
            "grid index {grid_index} out of range ({} points)",
            result.grid_points.len()
        )));
    }
    let n_max = *result.config.n_grid.last().expect("validated non-empty");
    let rows: Vec<&ReplicateRecord> = result.records.iter().filter(|r| r.n == n_max).collect();
    if rows.len() < 200 {
        return Err(Error::Input(format!(
            "normality check needs >= 200 replicates at the largest N, got {}",
            rows.len()
        )));
    }
    Ok(normality_check_values(
        rows.iter().map(|r| r.f_hat_grid[grid_index]),
        result.f_star_grid[grid_index],
        result.sigma2_grid[grid_index],
        n_max,
        rows.len(),
    ))
}

/// Checks the Chebyshev exceedance and coverage bounds against the
/// recorded replicates. `None` if the config carries no bounds spec.
///
/// A bound passes when the empirical frequency respects it within three
/// binomial standard deviations computed at the bound.
pub fn validate_bounds(result: &ExperimentResult) -> Option<BoundsReport> {
    let spec = result.config.bounds.as_ref()?;
    let m = result.exact_moments.len();
    let d_jac = DMatrix::from_fn(m, m, |i, j| result.jacobian[i][j]);
    let sigma_h = DMatrix::from_fn(m, m, |i, j| result.sigma_h[i][j]);
    // |D|^{1/2} via the eigendecomposition of the positive definite -D.
    let eig = (-&d_jac).symmetric_eigen();
    let sqrt_abs_d = &eig.eigenvectors
        * DMatrix::from_diagonal(&eig.eigenvalues.map(|e| e.max(0.0).sqrt()))
        * eig.eigenvectors.transpose();
    let d = DVector::from_column_slice(&result.exact_moments);
    let g_star = result.g_star.expect("bounds imply g_star");
    let band_coeff = result.band_coeff.expect("bounds imply band_coeff");

    let rows = result
        .config
        .n_grid
        .iter()
        .map(|&n| {
            let recs: Vec<&ReplicateRecord> =
                result.records.iter().filter(|r| r.n == n).collect();
            let r_ok = recs.len().max(1);
            let exceed = recs
                .iter()
                .filter(|r| {
                    let dd = DVector::from_column_slice(&r.d_hat) - &d;
                    (&sqrt_abs_d * dd).norm() > spec.chebyshev_a
                })
                .count() as f64
                / r_ok as f64;
            let cheb_bound = chebyshev_tail(&sigma_h, &d_jac, n, spec.chebyshev_a);
            let cheb_clip = cheb_bound.min(1.0);
            let cheb_sigma = (cheb_clip * (1.0 - cheb_clip) / r_ok as f64).sqrt();
            let chebyshev_ok = exceed <= cheb_clip + 3.0 * cheb_sigma;

            let coverage = recs
                .iter()
                .filter(|r| {
                    let gh = r.g_hat.expect("bounds imply g_hat");
                    (gh - g_star).abs() <= spec.band_a
                })
                .count() as f64
                / r_ok as f64;
            let band_bound = (1.0
                - band_coeff * result.cheb_trace / (n as f64 * spec.band_a * spec.band_a))
                .clamp(0.0, 1.0);
            let band_sigma = (band_bound * (1.0 - band_bound) / r_ok as f64).sqrt();
            let band_ok = coverage >= band_bound - 3.0 * band_sigma;

            BoundsRow {
                n,
                replicates: recs.len(),
                chebyshev_a: spec.chebyshev_a,
                chebyshev_bound: cheb_bound,
                chebyshev_empirical: exceed,
                chebyshev_ok,
                band_a: spec.band_a,
                band_bound,
                band_coverage: coverage,
                band_ok,
            }
        })
        .collect();
    Some(BoundsReport { rows })
}

/// Writes the per-replicate table as CSV with columns
/// `N,replicate,d_hat_1..M,lambda_hat_1..M,l1_err,kl,sup_err,chan1_resid`.
pub fn write_replicates_csv<W: std::io::Write>(
    result: &ExperimentResult,
    out: &mut W,
) -> Result<()> {
    let m = result.exact_moments.len();
    let mut header = String::from("N,replicate");
    for k in 1..=m {
        header.push_str(&format!(",d_hat_{k}"));
    }
    for k in 1..=m {
        header.push_str(&format!(",lambda_hat_{k}"));
    }
    header.push_str(",l1_err,kl,sup_err,chan1_resid");
    writeln!(out, "{header}")?;
    for r in &result.records {
        let mut line = format!("{},{}", r.n, r.replicate);
        for v in &r.d_hat {
            line.push_str(&format!(",{v}"));
        }
        for v in &r.lambda_hat {
            line.push_str(&format!(",{v}"));
        }
        line.push_str(&format!(
            ",{},{},{},{}",
            r.l1_err, r.kl, r.sup_err, r.chan1_resid
        ));
        writeln!(out, "{line}")?;
    }
    Ok(())
}

/// Aggregate document written as `aggregate.json`: everything except the
/// raw per-replicate table, plus the bound validation when configured.
pub fn aggregate_json(result: &ExperimentResult) -> serde_json::Value {
    #[derive(Serialize)]
    struct Doc<'a> {
        config: &'a ExperimentConfig,
        reference: &'a MaxentModel,
        exact_moments: &'a [f64],
        sigma_h: &'a [Vec<f64>],
        jacobian: &'a [Vec<f64>],
        grid_points: &'a [f64],
        f_star_grid: &'a [f64],
        sigma2_grid: &'a [f64],
        aggregates: &'a [AggregateRow],
        failures: &'a [FailureRecord],
        failure_rate: f64,
        l1_median_slope: Option<f64>,
        kl_median_slope: Option<f64>,
        bounds: Option<BoundsReport>,
    }
    serde_json::to_value(Doc {
        config: &result.config,
        reference: &result.reference,
        exact_moments: &result.exact_moments,
        sigma_h: &result.sigma_h,
        jacobian: &result.jacobian,
        grid_points: &result.grid_points,
        f_star_grid: &result.f_star_grid,
        sigma2_grid: &result.sigma2_grid,
        aggregates: &result.aggregates,
        failures: &result.failures,
        failure_rate: result.failure_rate(),
        l1_median_slope: result.l1_median_slope,
        kl_median_slope: result.kl_median_slope,
        bounds: validate_bounds(result),
    })
    .expect("result serialization cannot fail")
}
