//! First-order dependence of the fitted density on the moment data,
//! Chebyshev-type tail bounds and CLT asymptotics.
//!
//! Write `C` for the covariance of `h` under the fitted density (the dual
//! Hessian at the optimum). The multiplier map `d -> lambda(d)` has
//! Jacobian `D = -C^{-1}`, which gives the first-order density change
//!
//! ```text
//! f_hat(x) - f(x) ~= -f(x) <h(x) - d, D delta_d>        (delta_d small)
//! ```
//!
//! and, with `Sigma(h)` the covariance of `h(X)` under the sampling law,
//! the asymptotic variances
//!
//! ```text
//! sigma^2(x) = f(x)^2 (h(x)-d)' D Sigma(h) D (h(x)-d),
//! sigma^2(g) = w' Sigma(h) w,   w = D (int h g f dm - d int g f dm),
//! ```
//!
//! of `sqrt(N) (f_hat(x) - f(x))` and `sqrt(N) (int g f_hat - int g f)`.
//! `D` is negative definite; wherever a bound needs a positive form the
//! matrix absolute value `|D| = -D = C^{-1}` is used.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::quad::QuadratureRule;
use crate::solver::{dual_hessian, MaxentModel};

/// Relative eigenvalue floor below which `C` is declared non-invertible.
/// Past this point `D` is numerically meaningless; reduce the number of
/// constraints or fit with a ridge.
const EIG_FLOOR: f64 = 1e-12;

/// Warn when `|delta_d|` exceeds this fraction of `|d|`: the first-order
/// formulas degrade quadratically in the perturbation size.
const PERTURBATION_WARN_FRACTION: f64 = 0.1;

/// Jacobian `D = d lambda / d d = -C^{-1}` of the multiplier map at the
/// fitted model.
///
/// Fails with a conditioning error (carrying the eigenvalue range) when
/// the smallest eigenvalue of `C` is below `1e-12` of the largest.
pub fn jacobian(model: &MaxentModel, rule: &QuadratureRule) -> Result<DMatrix<f64>> {
    let c = dual_hessian(&model.basis, rule, &model.lambda)?;
    let eig = c.clone().symmetric_eigen();
    let min_eig = eig.eigenvalues.min();
    let max_eig = eig.eigenvalues.max();
    if !(min_eig > EIG_FLOOR * max_eig && min_eig > 0.0) {
        return Err(Error::Conditioning {
            min_eig,
            max_eig,
            hint: "covariance of h is numerically singular; the moment-to-multiplier \
                   Jacobian is not defined"
                .into(),
        });
    }
    let inv = nalgebra::Cholesky::new(c)
        .ok_or_else(|| Error::Conditioning {
            min_eig,
            max_eig,
            hint: "Cholesky factorization failed".into(),
        })?
        .inverse();
    Ok(-inv)
}

fn centered_h(model: &MaxentModel, x: f64) -> DVector<f64> {
    let h = model.basis.eval(x);
    DVector::from_iterator(
        h.len(),
        h.iter().zip(model.target.as_slice()).map(|(&hk, &dk)| hk - dk),
    )
}

/// First-order prediction of the density change at `x` when the moment
/// vector moves by `delta_d`:
/// `f_hat(x) - f(x) ~= -f(x) <h(x) - d, D delta_d>`.
pub fn perturb_density(
    model: &MaxentModel,
    d_jac: &DMatrix<f64>,
    delta_d: &[f64],
    x: f64,
) -> f64 {
    let d_norm: f64 = model
        .target
        .as_slice()
        .iter()
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    let delta_norm: f64 = delta_d.iter().map(|v| v * v).sum::<f64>().sqrt();
    if d_norm > 0.0 && delta_norm > PERTURBATION_WARN_FRACTION * d_norm {
        log::warn!(
            "perturbation |delta_d| = {delta_norm:.3e} exceeds 10% of |d| = {d_norm:.3e}; \
             the first-order prediction may be inaccurate"
        );
    }
    let step = d_jac * DVector::from_column_slice(delta_d);
    -model.density(x) * centered_h(model, x).dot(&step)
}

/// Coefficient vector `c_g = int h g f dm - d int g f dm` of the linear
/// functional `g` under the first-order expansion.
fn functional_coefficients<F: Fn(f64) -> f64>(
    model: &MaxentModel,
    rule: &QuadratureRule,
    g: &F,
) -> Result<DVector<f64>> {
    let m = model.basis.len();
    let h = model.basis.eval_grid(rule);
    let mut hg = DVector::zeros(m);
    let mut g_mass = 0.0;
    for (i, (&x, &w)) in rule.nodes().iter().zip(rule.weights()).enumerate() {
        let gv = g(x);
        if !gv.is_finite() {
            return Err(Error::numeric_at("functional g is not finite", x));
        }
        let wf = w * model.density(x) * gv;
        g_mass += wf;
        for k in 0..m {
            hg[k] += wf * h[(i, k)];
        }
    }
    let d = DVector::from_column_slice(model.target.as_slice());
    Ok(hg - g_mass * d)
}

/// Cauchy-Schwarz bound on the first-order change of `int g f dm`.
///
/// Returns `(lhs, rhs)` with
/// `lhs = (int g f_hat dm - int g f dm)^2` under the first-order density
/// change, and `rhs = |<c_g, D c_g>| * |<delta_d, D delta_d>|`, the
/// Cauchy-Schwarz majorant in the `|D|` inner product. The contract
/// `lhs <= rhs` holds for every bounded `g` (equality when `M = 1`).
pub fn functional_delta_bound<F: Fn(f64) -> f64>(
    model: &MaxentModel,
    rule: &QuadratureRule,
    d_jac: &DMatrix<f64>,
    g: F,
    delta_d: &[f64],
) -> Result<(f64, f64)> {
    // lhs by quadrature of g against the predicted density change.
    let mut change = 0.0;
    for (&x, &w) in rule.nodes().iter().zip(rule.weights()) {
        change += w * g(x) * perturb_density(model, d_jac, delta_d, x);
    }
    let lhs = change * change;

    let c_g = functional_coefficients(model, rule, &g)?;
    let dd = DVector::from_column_slice(delta_d);
    let rhs = (c_g.dot(&(d_jac * &c_g))).abs() * (dd.dot(&(d_jac * &dd))).abs();
    Ok((lhs, rhs))
}

/// Chebyshev tail bound `tr(|D| Sigma(h)) / (N a^2)` on
/// `P(||D|^{1/2} (d_hat - d)| > a)`, with `|D| = C^{-1}`.
pub fn chebyshev_tail(sigma_h: &DMatrix<f64>, d_jac: &DMatrix<f64>, n: usize, a: f64) -> f64 {
    let abs_d = -d_jac;
    (abs_d * sigma_h).trace() / (n as f64 * a * a)
}

/// Lower bound on `P(|int g f_hat dm - int g f dm| <= a)`:
/// `1 - |<c_g, D c_g>| tr(|D| Sigma(h)) / (N a^2)`, clipped to `[0, 1]`.
pub fn corollary_band<F: Fn(f64) -> f64>(
    model: &MaxentModel,
    rule: &QuadratureRule,
    d_jac: &DMatrix<f64>,
    sigma_h: &DMatrix<f64>,
    g: F,
    n: usize,
    a: f64,
) -> Result<f64> {
    let c_g = functional_coefficients(model, rule, &g)?;
    let coeff = (c_g.dot(&(d_jac * &c_g))).abs();
    let tail = coeff * ((-d_jac) * sigma_h).trace() / (n as f64 * a * a);
    Ok((1.0 - tail).clamp(0.0, 1.0))
}

/// Asymptotic variance of `sqrt(N) (f_hat(x) - f(x))`:
/// `sigma^2(x) = f(x)^2 (h(x)-d)' D Sigma(h) D (h(x)-d)`.
pub fn clt_sigma2_x(
    model: &MaxentModel,
    d_jac: &DMatrix<f64>,
    sigma_h: &DMatrix<f64>,
    x: f64,
) -> f64 {
    let v = d_jac * centered_h(model, x);
    let f = model.density(x);
    (f * f * v.dot(&(sigma_h * &v))).max(0.0)
}

/// Asymptotic variance of `sqrt(N) (int g f_hat dm - int g f dm)`:
/// `sigma^2(g) = w' Sigma(h) w` with `w = D c_g`.
pub fn clt_sigma2_g<F: Fn(f64) -> f64>(
    model: &MaxentModel,
    rule: &QuadratureRule,
    d_jac: &DMatrix<f64>,
    sigma_h: &DMatrix<f64>,
    g: F,
) -> Result<f64> {
    let c_g = functional_coefficients(model, rule, &g)?;
    let w = d_jac * c_g;
    Ok(w.dot(&(sigma_h * &w)).max(0.0))
}

/// Matrices and variance profiles quantifying the sample dependence of a
/// fitted model.
#[derive(Debug, Clone)]
pub struct SensitivityReport {
    /// Covariance of `h` under the fitted density (dual Hessian at the fit).
    pub c: DMatrix<f64>,
    /// Jacobian `D = -C^{-1}` of the moment-to-multiplier map.
    pub d_jac: DMatrix<f64>,
    /// Covariance of `h(X)` under the sampling law.
    pub sigma_h: DMatrix<f64>,
    /// Evaluation abscissas of the variance profile.
    pub grid: Vec<f64>,
    /// `sigma^2(x)` on the grid.
    pub sigma2_grid: Vec<f64>,
    /// Fitted density on the grid.
    pub f_star_grid: Vec<f64>,
    /// The analyzed model.
    pub model: MaxentModel,
}

impl SensitivityReport {
    /// Assembles the report for a converged model. `sigma_h` is the
    /// covariance of `h(X)` under the sampling law: the sample covariance
    /// when analyzing data, the analytic covariance under the true
    /// density in simulations.
    pub fn compute(
        model: &MaxentModel,
        rule: &QuadratureRule,
        sigma_h: DMatrix<f64>,
        grid: &[f64],
    ) -> Result<Self> {
        let m = model.basis.len();
        if sigma_h.nrows() != m || sigma_h.ncols() != m {
            return Err(Error::Input(format!(
                "sigma_h is {}x{} for a basis of {} functions",
                sigma_h.nrows(),
                sigma_h.ncols(),
                m
            )));
        }
        let c = dual_hessian(&model.basis, rule, &model.lambda)?;
        let d_jac = jacobian(model, rule)?;
        let sigma2_grid = grid
            .iter()
            .map(|&x| clt_sigma2_x(model, &d_jac, &sigma_h, x))
            .collect();
        let f_star_grid = grid.iter().map(|&x| model.density(x)).collect();
        Ok(SensitivityReport {
            c,
            d_jac,
            sigma_h,
            grid: grid.to_vec(),
            sigma2_grid,
            f_star_grid,
            model: model.clone(),
        })
    }

    /// Serializable view with matrices as row-major nested arrays.
    pub fn to_json_value(&self) -> serde_json::Value {
        #[derive(Serialize)]
        struct Doc<'a> {
            c: Vec<Vec<f64>>,
            d: Vec<Vec<f64>>,
            sigma_h: Vec<Vec<f64>>,
            grid: &'a [f64],
            sigma2_grid: &'a [f64],
            f_star_grid: &'a [f64],
            model: &'a MaxentModel,
        }
        serde_json::to_value(Doc {
            c: matrix_rows(&self.c),
            d: matrix_rows(&self.d_jac),
            sigma_h: matrix_rows(&self.sigma_h),
            grid: &self.grid,
            sigma2_grid: &self.sigma2_grid,
            f_star_grid: &self.f_star_grid,
            model: &self.model,
        })
        .expect("report serialization cannot fail")
    }

    /// Writes the CLT band as CSV `x,f_star,sigma2,band_lo,band_hi` with
    /// `band = f_star -+ z sigma(x) / sqrt(N)`.
    pub fn write_band_csv<W: std::io::Write>(&self, n: usize, z: f64, out: &mut W) -> Result<()> {
        writeln!(out, "x,f_star,sigma2,band_lo,band_hi")?;
        let sqrt_n = (n as f64).sqrt();
        for ((&x, &f), &s2) in self
            .grid
            .iter()
            .zip(&self.f_star_grid)
            .zip(&self.sigma2_grid)
        {
            let half = z * s2.sqrt() / sqrt_n;
            writeln!(out, "{},{},{},{},{}", x, f, s2, f - half, f + half)?;
        }
        Ok(())
    }
}

/// Row-major copy of a matrix for serialization.
pub fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}
