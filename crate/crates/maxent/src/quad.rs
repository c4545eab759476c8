//! Base measure space and deterministic numerical integration.
//!
//! The measure space is a closed interval or a half-line carrying Lebesgue
//! measure, discretized by a Gauss-Legendre rule. Every integral in the
//! crate goes through [`QuadratureRule::integrate`] (or directly through
//! the stored nodes and weights), so exchanging the discretization is a
//! single seam.
//!
//! Half-lines are handled by the logarithmic change of variables
//! `x = a - scale * ln(1 - t)`, `t in (0, 1)`, whose Jacobian
//! `scale / (1 - t)` is folded into the weights. Densities that decay like
//! `exp(-(x - a)/scale)` become (near-)polynomial in `t`, so the mapped
//! rule keeps spectral accuracy when `scale` matches the decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default number of quadrature nodes. Overkill for up to ~10 moment
/// constraints while keeping a full integral in the microsecond range.
pub const DEFAULT_QUAD_POINTS: usize = 128;

/// The support of the base measure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SupportSpec {
    /// The interval `[a, b]` with Lebesgue measure.
    FiniteInterval { a: f64, b: f64 },
    /// The half-line `[a, inf)` with Lebesgue measure. `halfline_scale`
    /// is the decay scale used by the change of variables.
    HalfLine {
        a: f64,
        #[serde(rename = "halfline_scale")]
        scale: f64,
    },
}

impl SupportSpec {
    /// Finite interval `[a, b]`.
    pub fn finite(a: f64, b: f64) -> Result<Self> {
        let spec = SupportSpec::FiniteInterval { a, b };
        spec.validate()?;
        Ok(spec)
    }

    /// Half-line `[a, inf)` with the given decay scale.
    pub fn half_line(a: f64, scale: f64) -> Result<Self> {
        let spec = SupportSpec::HalfLine { a, scale };
        spec.validate()?;
        Ok(spec)
    }

    /// Checks the support invariants.
    pub fn validate(&self) -> Result<()> {
        match *self {
            SupportSpec::FiniteInterval { a, b } => {
                if !a.is_finite() || !b.is_finite() {
                    return Err(Error::Config(format!(
                        "finite interval endpoints must be finite, got [{a}, {b}]"
                    )));
                }
                if a >= b {
                    return Err(Error::Config(format!(
                        "finite interval requires a < b, got [{a}, {b}]"
                    )));
                }
            }
            SupportSpec::HalfLine { a, scale } => {
                if !a.is_finite() {
                    return Err(Error::Config(format!(
                        "half-line lower endpoint must be finite, got {a}"
                    )));
                }
                if !(scale.is_finite() && scale > 0.0) {
                    return Err(Error::Config(format!(
                        "half-line scale must be positive and finite, got {scale}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Whether `x` lies inside the support.
    pub fn contains(&self, x: f64) -> bool {
        match *self {
            SupportSpec::FiniteInterval { a, b } => x >= a && x <= b,
            SupportSpec::HalfLine { a, .. } => x >= a,
        }
    }

    /// Lower endpoint.
    pub fn lower(&self) -> f64 {
        match *self {
            SupportSpec::FiniteInterval { a, .. } => a,
            SupportSpec::HalfLine { a, .. } => a,
        }
    }
}

/// A fixed quadrature rule on a [`SupportSpec`].
///
/// Immutable after construction; `integrate` is pure, so a rule can be
/// shared freely across concurrent workers.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    nodes: Vec<f64>,
    weights: Vec<f64>,
    support: SupportSpec,
}

impl QuadratureRule {
    /// Builds an `n`-point Gauss-Legendre rule on the support.
    ///
    /// For a half-line the rule is built on `t in (0, 1)` and mapped by
    /// `x = a - scale * ln(1 - t)` with the Jacobian folded into the
    /// weights. Requires `n >= 2`.
    pub fn gauss_legendre(support: SupportSpec, n: usize) -> Result<Self> {
        support.validate()?;
        if n < 2 {
            return Err(Error::Config(format!(
                "quadrature rule needs at least 2 points, got {n}"
            )));
        }
        let (t, w) = legendre_nodes_weights(n);
        let (nodes, weights) = match support {
            SupportSpec::FiniteInterval { a, b } => {
                let half = 0.5 * (b - a);
                let mid = 0.5 * (a + b);
                let nodes = t.iter().map(|&ti| mid + half * ti).collect();
                let weights = w.iter().map(|&wi| half * wi).collect();
                (nodes, weights)
            }
            SupportSpec::HalfLine { a, scale } => {
                // Rule on [0, 1] first, then the log map.
                let mut nodes = Vec::with_capacity(n);
                let mut weights = Vec::with_capacity(n);
                for (&ti, &wi) in t.iter().zip(&w) {
                    let u = 0.5 * (ti + 1.0);
                    let wu = 0.5 * wi;
                    nodes.push(a - scale * (1.0 - u).ln());
                    weights.push(wu * scale / (1.0 - u));
                }
                (nodes, weights)
            }
        };
        Ok(QuadratureRule {
            nodes,
            weights,
            support,
        })
    }

    /// Builds an `n`-point rule for the unit-mass exponentially tilted
    /// measure `(1/scale) exp(-(x - a)/scale) dx` on a half-line.
    ///
    /// Under the substitution `t = 1 - exp(-(x - a)/scale)` this measure
    /// is exactly Lebesgue on `(0, 1)`, so the rule is the plain
    /// Gauss-Legendre rule mapped through `x = a - scale ln(1 - t)` with
    /// unchanged weights. It is the natural reference measure for
    /// Laplace-transform inversion: with only decaying constraint
    /// functions, entropy relative to Lebesgue measure on the half-line
    /// is unbounded (mass can always escape towards infinity), while
    /// relative to the tilted measure the problem is well posed.
    pub fn gauss_legendre_tilted(support: SupportSpec, n: usize) -> Result<Self> {
        support.validate()?;
        let SupportSpec::HalfLine { a, scale } = support else {
            return Err(Error::Config(
                "the tilted rule is defined on half-line supports only".into(),
            ));
        };
        if n < 2 {
            return Err(Error::Config(format!(
                "quadrature rule needs at least 2 points, got {n}"
            )));
        }
        let (t, w) = legendre_nodes_weights(n);
        let mut nodes = Vec::with_capacity(n);
        let mut weights = Vec::with_capacity(n);
        for (&ti, &wi) in t.iter().zip(&w) {
            let u = 0.5 * (ti + 1.0);
            nodes.push(a - scale * (1.0 - u).ln());
            weights.push(0.5 * wi);
        }
        Ok(QuadratureRule {
            nodes,
            weights,
            support,
        })
    }

    /// Number of nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn support(&self) -> SupportSpec {
        self.support
    }

    /// `sum_i w_i f(x_i)`, the discrete realization of `int_S f dm`.
    ///
    /// Fails with a numeric error carrying the offending node if `f`
    /// evaluates to a non-finite value.
    pub fn integrate<F: Fn(f64) -> f64>(&self, f: F) -> Result<f64> {
        let mut acc = 0.0;
        for (&x, &w) in self.nodes.iter().zip(&self.weights) {
            let v = f(x);
            if !v.is_finite() {
                return Err(Error::numeric_at("integrand is not finite", x));
            }
            acc += w * v;
        }
        Ok(acc)
    }

    /// Integrates values already tabulated on the nodes.
    pub fn integrate_values(&self, values: &[f64]) -> Result<f64> {
        if values.len() != self.len() {
            return Err(Error::Input(format!(
                "tabulated integrand has {} values, rule has {} nodes",
                values.len(),
                self.len()
            )));
        }
        Ok(self
            .weights
            .iter()
            .zip(values)
            .map(|(&w, &v)| w * v)
            .sum())
    }
}

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
///
/// Newton iteration on the Legendre recurrence, with the Tricomi initial
/// guess. Roots are computed for one half and mirrored so the rule is
/// exactly symmetric.
fn legendre_nodes_weights(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for k in 0..m {
        // k-th root counted from x = +1 downwards.
        let mut x = (std::f64::consts::PI * (k as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_p(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() <= 1e-15 * x.abs().max(1.0) {
                let (p2, d2) = legendre_p(n, x);
                dp = d2;
                x -= p2 / d2;
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[n - 1 - k] = x;
        weights[n - 1 - k] = w;
        nodes[k] = -x;
        weights[k] = w;
    }
    if n % 2 == 1 {
        // Central node of an odd rule is exactly zero.
        let (_, d) = legendre_p(n, 0.0);
        nodes[n / 2] = 0.0;
        weights[n / 2] = 2.0 / (d * d);
    }
    (nodes, weights)
}

/// Value and derivative of the Legendre polynomial `P_n` at `x` by the
/// three-term recurrence.
fn legendre_p(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for j in 2..=n {
        let jf = j as f64;
        let p2 = ((2.0 * jf - 1.0) * x * p1 - (jf - 1.0) * p0) / jf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn weights_sum_to_interval_length() {
        let rule = QuadratureRule::gauss_legendre(SupportSpec::finite(0.0, 1.0).unwrap(), 16)
            .unwrap();
        let total: f64 = rule.weights().iter().sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-14);

        let rule = QuadratureRule::gauss_legendre(SupportSpec::finite(0.0, 2.0).unwrap(), 16)
            .unwrap();
        let total: f64 = rule.weights().iter().sum();
        assert_abs_diff_eq!(total, 2.0, epsilon = 1e-14);
    }

    #[test]
    fn integrates_constants_and_linear() {
        let rule = QuadratureRule::gauss_legendre(SupportSpec::finite(0.0, 1.0).unwrap(), 16)
            .unwrap();
        assert_abs_diff_eq!(rule.integrate(|_| 1.0).unwrap(), 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(rule.integrate(|x| x).unwrap(), 0.5, epsilon = 1e-14);
    }

    #[test]
    fn integrates_exponential_on_unit_interval() {
        let rule = QuadratureRule::gauss_legendre(SupportSpec::finite(0.0, 1.0).unwrap(), 16)
            .unwrap();
        let exact = 1.0 - (-1.0f64).exp(); // 0.6321205588285577
        assert_abs_diff_eq!(rule.integrate(|x| (-x).exp()).unwrap(), exact, epsilon = 1e-13);
    }

    #[test]
    fn halfline_exponential_mass() {
        let rule = QuadratureRule::gauss_legendre(SupportSpec::half_line(0.0, 1.0).unwrap(), 64)
            .unwrap();
        assert_abs_diff_eq!(rule.integrate(|x| (-x).exp()).unwrap(), 1.0, epsilon = 1e-10);
        // Mismatched decay still converges, just not exactly.
        assert_abs_diff_eq!(
            rule.integrate(|x| 2.0 * (-2.0 * x).exp()).unwrap(),
            1.0,
            epsilon = 1e-8
        );
    }

    #[test]
    fn polynomial_exactness_up_to_2n_minus_1() {
        let n = 8;
        let rule =
            QuadratureRule::gauss_legendre(SupportSpec::finite(0.0, 1.0).unwrap(), n).unwrap();
        for k in 0..=(2 * n - 1) {
            let exact = 1.0 / (k as f64 + 1.0);
            let got = rule.integrate(|x| x.powi(k as i32)).unwrap();
            assert!(
                ((got - exact) / exact).abs() <= 1e-12,
                "monomial x^{k}: got {got}, exact {exact}"
            );
        }
    }

    #[test]
    fn refinement_stability_for_smooth_integrand() {
        let support = SupportSpec::finite(0.0, 2.0).unwrap();
        let f = |x: f64| (x.sin() + 1.5).ln();
        let coarse = QuadratureRule::gauss_legendre(support, 64)
            .unwrap()
            .integrate(f)
            .unwrap();
        let fine = QuadratureRule::gauss_legendre(support, 128)
            .unwrap()
            .integrate(f)
            .unwrap();
        assert!(((coarse - fine) / fine).abs() < 1e-10);
    }

    #[test]
    fn all_weights_positive_nodes_inside() {
        for support in [
            SupportSpec::finite(-1.5, 3.0).unwrap(),
            SupportSpec::half_line(0.5, 2.0).unwrap(),
        ] {
            let rule = QuadratureRule::gauss_legendre(support, 33).unwrap();
            assert!(rule.weights().iter().all(|&w| w > 0.0));
            assert!(rule.nodes().iter().all(|&x| support.contains(x)));
        }
    }

    #[test]
    fn invalid_supports_rejected() {
        assert!(SupportSpec::finite(1.0, 1.0).is_err());
        assert!(SupportSpec::finite(2.0, 1.0).is_err());
        assert!(SupportSpec::half_line(0.0, 0.0).is_err());
        assert!(SupportSpec::half_line(0.0, -1.0).is_err());
        assert!(SupportSpec::half_line(f64::INFINITY, 1.0).is_err());
        assert!(
            QuadratureRule::gauss_legendre(SupportSpec::finite(0.0, 1.0).unwrap(), 1).is_err()
        );
    }

    #[test]
    fn non_finite_integrand_reports_node() {
        let rule = QuadratureRule::gauss_legendre(SupportSpec::finite(0.0, 1.0).unwrap(), 8)
            .unwrap();
        let err = rule.integrate(|x| 1.0 / (x - rule.nodes()[3])).unwrap_err();
        match err {
            Error::Numeric { node: Some(x), .. } => assert_eq!(x, rule.nodes()[3]),
            other => panic!("expected numeric error with node, got {other:?}"),
        }
    }

    #[test]
    fn support_serde_round_trip() {
        let s = SupportSpec::half_line(0.0, 1.5).unwrap();
        let json = serde_json::to_string(&s).unwrap();
        assert!(json.contains("\"kind\":\"half_line\""));
        assert!(json.contains("halfline_scale"));
        let back: SupportSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(s, back);
    }
}
