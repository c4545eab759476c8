//! Maxent density fitting by convex dual minimization.
//!
//! The density matching the constraints has the exponential-family form
//! `f(x) = exp(-ln Z(lambda) - <lambda, h(x)>)` and the multipliers are
//! found by minimizing the dual objective
//!
//! ```text
//! Sigma(lambda, d) = ln Z(lambda) + <lambda, d>,
//! Z(lambda) = int exp(-<lambda, h(x)>) dm(x).
//! ```
//!
//! `ln Z` is convex, its gradient is `-E[h]` under the current density and
//! its Hessian is the covariance of `h`, so a damped Newton iteration on
//! `Sigma` converges globally on feasible data. All integrals are the
//! quadrature sums of the configured rule; `ln Z` is evaluated with a
//! max-exponent shift so large multipliers cannot overflow.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::{MomentBasis, MomentVector};
use crate::error::{Error, Result};
use crate::quad::{QuadratureRule, SupportSpec};

/// Newton solver controls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    /// Stop when the max-norm of the dual gradient falls below this.
    pub tol_grad: f64,
    /// Maximum Newton iterations.
    pub max_iter: usize,
    /// Starting multipliers; zero (the m-uniform density) when absent.
    pub initial_lambda: Option<Vec<f64>>,
    /// Tikhonov term added to the Hessian. Zero by default; useful when
    /// nearly collinear constraint functions make the covariance singular
    /// at working precision.
    pub ridge: f64,
    /// Iterate max-norm beyond which the moment vector is declared
    /// infeasible (the dual is unbounded below exactly when no density
    /// matches the data, so the iterates run away).
    pub lambda_bound: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol_grad: 1e-10,
            max_iter: 200,
            initial_lambda: None,
            ridge: 0.0,
            lambda_bound: 1e6,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        if self.tol_grad.is_nan() || self.tol_grad <= 0.0 {
            return Err(Error::Config(format!(
                "tol_grad must be positive, got {}",
                self.tol_grad
            )));
        }
        if self.ridge < 0.0 {
            return Err(Error::Config(format!(
                "ridge must be nonnegative, got {}",
                self.ridge
            )));
        }
        if self.lambda_bound.is_nan() || self.lambda_bound <= 0.0 {
            return Err(Error::Config(format!(
                "lambda_bound must be positive, got {}",
                self.lambda_bound
            )));
        }
        Ok(())
    }
}

/// A fitted maxent model: multipliers, log normalizer and fit targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaxentModel {
    pub basis: MomentBasis,
    pub support: SupportSpec,
    /// Multipliers of the non-trivial constraints.
    pub lambda: Vec<f64>,
    /// `ln Z(lambda)`, i.e. the multiplier of the implicit `h_0 = 1`.
    pub log_z: f64,
    /// Moment vector the model was fitted to.
    pub target: MomentVector,
    pub converged: bool,
    pub iterations: usize,
    pub grad_norm: f64,
}

impl MaxentModel {
    /// Density value `exp(-log_z - <lambda, h(x)>)`; strictly positive.
    pub fn density(&self, x: f64) -> f64 {
        let h = self.basis.eval(x);
        let mut t = -self.log_z;
        for (&l, &hk) in self.lambda.iter().zip(&h) {
            t -= l * hk;
        }
        t.exp()
    }

    /// Density tabulated on the rule's nodes.
    pub fn density_on(&self, rule: &QuadratureRule) -> Vec<f64> {
        rule.nodes().iter().map(|&x| self.density(x)).collect()
    }

    /// Moments of the fitted density under the rule, `int h_k f dm`.
    pub fn reproduced_moments(&self, rule: &QuadratureRule) -> Result<Vec<f64>> {
        let h = self.basis.eval_grid(rule);
        let f = self.density_on(rule);
        let m = self.basis.len();
        let mut out = vec![0.0; m];
        for k in 0..m {
            let mut acc = 0.0;
            for (i, (&w, &fi)) in rule.weights().iter().zip(&f).enumerate() {
                acc += w * fi * h[(i, k)];
            }
            if !acc.is_finite() {
                return Err(Error::numeric("reproduced moment is not finite"));
            }
            out[k] = acc;
        }
        Ok(out)
    }

    /// Writes the density on an evaluation grid as two-column CSV `x,f`.
    pub fn write_density_csv<W: std::io::Write>(&self, xs: &[f64], out: &mut W) -> Result<()> {
        writeln!(out, "x,f")?;
        for &x in xs {
            writeln!(out, "{},{}", x, self.density(x))?;
        }
        Ok(())
    }
}

/// Evaluation grid used for density exports: `points` equally spaced
/// abscissas covering the support. A half-line is truncated where the
/// reference envelope `exp(-(x - a)/scale)` has dropped to 1e-6.
pub fn plot_grid(support: &SupportSpec, points: usize) -> Vec<f64> {
    let (lo, hi) = match *support {
        SupportSpec::FiniteInterval { a, b } => (a, b),
        SupportSpec::HalfLine { a, scale } => (a, a + scale * 1e6f64.ln()),
    };
    let n = points.max(2);
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

/// Shared per-iteration quantities: shifted partition sum, mean and
/// covariance of `h` under the current density.
struct DualEval {
    ln_z: f64,
    /// `E[h_k]` under `f_lambda`.
    mean: DVector<f64>,
    /// Covariance of `h` under `f_lambda`.
    cov: DMatrix<f64>,
}

/// One pass over the nodes computing `ln Z`, `E[h]` and `Cov(h)` with the
/// max-exponent shift `s = max_i(-<lambda, h(x_i)>)`.
fn dual_eval(h: &DMatrix<f64>, rule: &QuadratureRule, lambda: &DVector<f64>) -> Result<DualEval> {
    let n = rule.len();
    let m = lambda.len();
    let mut t = vec![0.0; n];
    let mut s = f64::NEG_INFINITY;
    for i in 0..n {
        let mut ti = 0.0;
        for k in 0..m {
            ti -= lambda[k] * h[(i, k)];
        }
        if !ti.is_finite() {
            return Err(Error::numeric_at("exponent is not finite", rule.nodes()[i]));
        }
        t[i] = ti;
        s = s.max(ti);
    }
    let mut total = 0.0;
    let mut p = vec![0.0; n];
    for i in 0..n {
        let q = rule.weights()[i] * (t[i] - s).exp();
        p[i] = q;
        total += q;
    }
    if !(total.is_finite() && total > 0.0) {
        return Err(Error::numeric("partition sum vanished or overflowed"));
    }
    let ln_z = s + total.ln();
    // p_i = w_i f_lambda(x_i); sums to one.
    for pi in &mut p {
        *pi /= total;
    }
    let mut mean = DVector::zeros(m);
    for i in 0..n {
        for k in 0..m {
            mean[k] += p[i] * h[(i, k)];
        }
    }
    let mut cov = DMatrix::zeros(m, m);
    for i in 0..n {
        for j in 0..m {
            let dj = h[(i, j)] - mean[j];
            for k in j..m {
                cov[(j, k)] += p[i] * dj * (h[(i, k)] - mean[k]);
            }
        }
    }
    for j in 0..m {
        for k in j..m {
            cov[(k, j)] = cov[(j, k)];
        }
    }
    Ok(DualEval { ln_z, mean, cov })
}

fn to_dvector(lambda: &[f64]) -> Result<DVector<f64>> {
    if lambda.iter().any(|x| !x.is_finite()) {
        return Err(Error::numeric("multiplier vector has non-finite entries"));
    }
    Ok(DVector::from_column_slice(lambda))
}

/// Normalization integral `Z` and its logarithm at the given multipliers.
///
/// `ln Z` is computed with the max-exponent shift and cannot overflow;
/// `Z = exp(ln Z)` itself may round to `inf` for extreme multipliers, so
/// callers doing arithmetic should prefer the logarithm.
pub fn partition_function(
    basis: &MomentBasis,
    rule: &QuadratureRule,
    lambda: &[f64],
) -> Result<(f64, f64)> {
    let lam = to_dvector(lambda)?;
    let h = basis.eval_grid(rule);
    let eval = dual_eval(&h, rule, &lam)?;
    Ok((eval.ln_z.exp(), eval.ln_z))
}

/// Dual objective `Sigma(lambda, d) = ln Z(lambda) + <lambda, d>`.
pub fn dual_objective(
    basis: &MomentBasis,
    rule: &QuadratureRule,
    lambda: &[f64],
    d: &MomentVector,
) -> Result<f64> {
    let (_, ln_z) = partition_function(basis, rule, lambda)?;
    Ok(ln_z + dot(lambda, d.as_slice()))
}

/// Dual gradient, `grad_k = d_k - E[h_k]` under the current density.
pub fn dual_gradient(
    basis: &MomentBasis,
    rule: &QuadratureRule,
    lambda: &[f64],
    d: &MomentVector,
) -> Result<Vec<f64>> {
    let lam = to_dvector(lambda)?;
    let h = basis.eval_grid(rule);
    let eval = dual_eval(&h, rule, &lam)?;
    Ok(d.as_slice()
        .iter()
        .zip(eval.mean.iter())
        .map(|(&dk, &mk)| dk - mk)
        .collect())
}

/// Dual Hessian: the covariance matrix of `h` under the current density.
/// Symmetric positive semidefinite.
pub fn dual_hessian(
    basis: &MomentBasis,
    rule: &QuadratureRule,
    lambda: &[f64],
) -> Result<DMatrix<f64>> {
    let lam = to_dvector(lambda)?;
    let h = basis.eval_grid(rule);
    Ok(dual_eval(&h, rule, &lam)?.cov)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// Armijo slope fraction and backtracking factor for the line search.
const ARMIJO_SLOPE: f64 = 1e-4;
const BACKTRACK: f64 = 0.5;
const MIN_STEP: f64 = 1e-14;
/// Below this Newton decrement (grad' C^{-1} grad) the predicted dual
/// decrease is within rounding of the objective, so the sufficient-
/// decrease test cannot register it; take undamped Newton steps instead
/// (the quadratically convergent phase).
const PURE_NEWTON_DECREMENT: f64 = 1e-9;

/// Fits the maxent density to the moment vector `d` by damped Newton
/// iteration on the dual.
///
/// * Infeasible data is diagnosed operationally: the dual is unbounded
///   below, the iterates run away, and the fit aborts once the multiplier
///   max-norm exceeds `opts.lambda_bound`.
/// * A singular Hessian aborts with a conditioning error suggesting a
///   positive `ridge`.
/// * Reaching `max_iter` aborts with the last gradient norm.
///
/// ```
/// use maxent::{fit, MomentBasis, MomentVector, QuadratureRule, SolverOptions, SupportSpec};
///
/// let support = SupportSpec::finite(0.0, 1.0)?;
/// let rule = QuadratureRule::gauss_legendre(support, 64)?;
/// let basis = MomentBasis::powers(vec![1])?;
/// let d = MomentVector::new(vec![0.3])?;
/// let model = fit(&d, &basis, &support, &rule, &SolverOptions::default())?;
/// assert!(model.converged);
/// let reproduced = model.reproduced_moments(&rule)?;
/// assert!((reproduced[0] - 0.3).abs() < 1e-8);
/// # Ok::<(), maxent::Error>(())
/// ```
pub fn fit(
    d: &MomentVector,
    basis: &MomentBasis,
    support: &SupportSpec,
    rule: &QuadratureRule,
    opts: &SolverOptions,
) -> Result<MaxentModel> {
    opts.validate()?;
    basis.validate()?;
    if d.len() != basis.len() {
        return Err(Error::Input(format!(
            "moment vector has {} entries for a basis of {} functions",
            d.len(),
            basis.len()
        )));
    }
    if rule.support() != *support {
        return Err(Error::Input(
            "quadrature rule was built for a different support".into(),
        ));
    }
    let m = basis.len();
    let mut lambda = match &opts.initial_lambda {
        Some(v) if v.len() == m => to_dvector(v)?,
        Some(v) => {
            return Err(Error::Config(format!(
                "initial_lambda has {} entries for {} constraints",
                v.len(),
                m
            )))
        }
        None => DVector::zeros(m),
    };
    let h = basis.eval_grid(rule);
    let dvec = DVector::from_column_slice(d.as_slice());

    let mut eval = dual_eval(&h, rule, &lambda)?;
    let mut iterations = 0;
    for iter in 0..=opts.max_iter {
        let grad = &dvec - &eval.mean;
        let grad_norm = grad.amax();
        if grad_norm <= opts.tol_grad {
            return Ok(MaxentModel {
                basis: basis.clone(),
                support: *support,
                lambda: lambda.iter().copied().collect(),
                log_z: eval.ln_z,
                target: d.clone(),
                converged: true,
                iterations: iter,
                grad_norm,
            });
        }
        if iter == opts.max_iter {
            return Err(Error::NonConvergence {
                grad_norm,
                iterations: opts.max_iter,
            });
        }

        let mut hess = eval.cov.clone();
        if opts.ridge > 0.0 {
            for k in 0..m {
                hess[(k, k)] += opts.ridge;
            }
        }
        let chol = nalgebra::Cholesky::new(hess).ok_or_else(|| {
            let eig = eval.cov.clone().symmetric_eigen();
            let min_eig = eig.eigenvalues.min();
            let max_eig = eig.eigenvalues.max();
            Error::Conditioning {
                min_eig,
                max_eig,
                hint: "covariance of h is singular at working precision; reduce the number of \
                       constraints or set a positive ridge"
                    .into(),
            }
        })?;
        // Newton direction for minimizing Sigma: -(C + ridge I)^{-1} grad.
        let direction = -chol.solve(&grad);
        let slope = grad.dot(&direction);
        debug_assert!(slope <= 0.0);

        let accepted = if -slope <= PURE_NEWTON_DECREMENT {
            let cand = &lambda + &direction;
            dual_eval(&h, rule, &cand).ok().map(|e| (cand, e))
        } else {
            let sigma0 = eval.ln_z + lambda.dot(&dvec);
            let mut step = 1.0;
            let mut found = None;
            while step >= MIN_STEP {
                let cand = &lambda + step * &direction;
                // An Err here means overflow along the ray: just shrink.
                if let Ok(e) = dual_eval(&h, rule, &cand) {
                    let sigma = e.ln_z + cand.dot(&dvec);
                    if sigma <= sigma0 + ARMIJO_SLOPE * step * slope {
                        found = Some((cand, e));
                        break;
                    }
                }
                step *= BACKTRACK;
            }
            found
        };
        let Some((next, next_eval)) = accepted else {
            // Flat to machine precision in the Newton direction.
            return Err(Error::NonConvergence {
                grad_norm,
                iterations: iter,
            });
        };
        lambda = next;
        eval = next_eval;
        iterations = iter + 1;

        if lambda.amax() > opts.lambda_bound {
            return Err(Error::Infeasible {
                reason: format!(
                    "dual iterates diverged (|lambda| = {:.3e} exceeded the bound {:.1e})",
                    lambda.amax(),
                    opts.lambda_bound
                ),
            });
        }
    }
    // Loop always returns; keep the compiler happy.
    Err(Error::NonConvergence {
        grad_norm: f64::NAN,
        iterations,
    })
}

/// Primal entropy `-int f ln f dm` of the fitted density by quadrature.
///
/// Terms with `f < 1e-300` are dropped (the `0 ln 0 = 0` convention).
pub fn entropy_primal(model: &MaxentModel, rule: &QuadratureRule) -> Result<f64> {
    let f = model.density_on(rule);
    let mut acc = 0.0;
    for ((&w, &fi), &x) in rule.weights().iter().zip(&f).zip(rule.nodes()) {
        if fi < 1e-300 {
            continue;
        }
        let term = w * fi * fi.ln();
        if !term.is_finite() {
            return Err(Error::numeric_at("entropy integrand is not finite", x));
        }
        acc -= term;
    }
    Ok(acc)
}

/// Absolute difference between the primal entropy (quadrature route) and
/// the dual value `ln Z + <lambda, d>` (algebraic route). Zero at the
/// optimum by duality; small on every converged model.
pub fn duality_gap(model: &MaxentModel, rule: &QuadratureRule) -> Result<f64> {
    let primal = entropy_primal(model, rule)?;
    let dual = model.log_z + dot(&model.lambda, model.target.as_slice());
    Ok((primal - dual).abs())
}
