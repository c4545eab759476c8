//! Laplace transform inversion from finitely many transform values.
//!
//! Given `E[exp(-alpha_k X)] = d_k` for a positive random variable `X`,
//! the density is reconstructed as the maxent density for the
//! exponentials basis. The reference measure is the exponentially tilted
//! one of [`QuadratureRule::gauss_legendre_tilted`], not plain Lebesgue
//! measure: with only decaying constraint functions the Lebesgue maxent
//! problem on a half-line has no solution (entropy grows without bound
//! as mass spreads towards infinity), whereas relative to the tilted
//! measure the normalization integral is finite for every multiplier
//! vector and the reconstruction is well posed. Equivalently, the fit
//! runs on `y = exp(-(x - a)/scale)` in the unit interval, where the
//! constraint functions become the fractional powers `y^(alpha scale)`.
//!
//! The fitted multipliers live in the model as usual; the physical
//! density on the half-line carries the tilt:
//! `f(x) = exp(-log_z - <lambda, h(x)>) * exp(-(x - a)/scale) / scale`.

use crate::basis::{MomentBasis, MomentVector};
use crate::error::Result;
use crate::quad::{QuadratureRule, SupportSpec};
use crate::solver::{fit, MaxentModel, SolverOptions};

/// A reconstructed density on the half-line.
#[derive(Debug, Clone, PartialEq)]
pub struct LaplaceInversion {
    /// Maxent model relative to the tilted reference measure.
    pub model: MaxentModel,
    /// The tilted quadrature rule the model was fitted with.
    rule: QuadratureRule,
}

impl LaplaceInversion {
    /// Physical (Lebesgue) density of `X` at `x`.
    pub fn density(&self, x: f64) -> f64 {
        let SupportSpec::HalfLine { a, scale } = self.model.support else {
            unreachable!("inversion models always live on a half-line");
        };
        self.model.density(x) * (-(x - a) / scale).exp() / scale
    }

    /// Transform values of the reconstruction, `int exp(-alpha_k x) f dx`.
    pub fn transform_values(&self) -> Result<Vec<f64>> {
        self.model.reproduced_moments(&self.rule)
    }

    pub fn rule(&self) -> &QuadratureRule {
        &self.rule
    }
}

/// Reconstructs the density of a nonnegative random variable from the
/// Laplace transform values `d_k` at rates `alpha_k`.
///
/// The pairs are screened first (each `d_k` in `(0, 1)`, strictly
/// decreasing in the rate); a failing screen reports infeasibility
/// without running the solver.
pub fn invert_laplace(
    alphas: Vec<f64>,
    values: Vec<f64>,
    support: SupportSpec,
    quad_points: usize,
    opts: &SolverOptions,
) -> Result<LaplaceInversion> {
    let basis = MomentBasis::exponentials(alphas)?;
    let d = MomentVector::new(values)?;
    d.screen_feasibility(&basis, &support)?;
    let rule = QuadratureRule::gauss_legendre_tilted(support, quad_points)?;
    let model = fit(&d, &basis, &support, &rule, opts)?;
    Ok(LaplaceInversion { model, rule })
}
