//! Maximum entropy solution of the generalized moment problem, with
//! quantified sample dependence.
//!
//! Given expectations `int h_k f dm = d_k` of finitely many functions
//! `h_k` of a random variable, the crate reconstructs the density of
//! maximum entropy subject to those constraints (the exponential-family
//! member `f(x) = exp(-ln Z - <lambda, h(x)>)`) by minimizing the convex
//! dual `ln Z(lambda) + <lambda, d>`. When the `d_k` are estimated from a
//! sample, the fitted density inherits the sampling noise; the crate
//! provides the first-order perturbation of the density in the moment
//! data, Chebyshev-type tail bounds, CLT asymptotics, and a Monte Carlo
//! harness that validates all of it empirically.
//!
//! Module map:
//!
//! * [`quad`] - the measure space and Gauss-Legendre integration;
//! * [`basis`] - constraint functions, moment vectors, sample estimates;
//! * [`solver`] - the dual Newton solver and fitted models;
//! * [`divergence`] - entropy, Kullback divergence, Pinsker bounds;
//! * [`sensitivity`] - moment-to-density Jacobian, tail bounds, CLT
//!   variances;
//! * [`experiment`] - replicated sampling experiments and their
//!   aggregation;
//! * [`laplace`] - density reconstruction from Laplace transform values.

pub mod basis;
pub mod divergence;
pub mod error;
pub mod experiment;
pub mod laplace;
pub mod quad;
pub mod sensitivity;
pub mod solver;

pub use basis::{estimate_moments, sample_covariance, MomentBasis, MomentVector, SampleSet};
pub use divergence::{
    dual_form_divergence, extended_entropy, kl_divergence, l1_distance, pinsker_gap,
    shannon_entropy, GridDensity,
};
pub use error::{Error, Result};
pub use experiment::{
    clt_normality_check, draw_sample, run_replicates, validate_bounds, BoundsSpec,
    ExperimentConfig, ExperimentResult, TrueDensity, TrueDensityKind,
};
pub use laplace::{invert_laplace, LaplaceInversion};
pub use quad::{QuadratureRule, SupportSpec, DEFAULT_QUAD_POINTS};
pub use sensitivity::{
    chebyshev_tail, clt_sigma2_g, clt_sigma2_x, corollary_band, functional_delta_bound, jacobian,
    perturb_density, SensitivityReport,
};
pub use solver::{
    dual_gradient, dual_hessian, dual_objective, duality_gap, entropy_primal, fit,
    partition_function, plot_grid, MaxentModel, SolverOptions,
};
