//! JSON config documents for the four commands.
//!
//! Schemas for these documents ship in `docs/`. Unknown fields are
//! rejected so typos surface as config errors instead of silently
//! falling back to defaults.

use std::path::PathBuf;

use serde::Deserialize;

use maxent::quad::DEFAULT_QUAD_POINTS;
use maxent::solver::SolverOptions;
use maxent::{MomentBasis, SupportSpec};

pub const DEFAULT_GRID_POINTS: usize = 512;

fn default_grid_points() -> usize {
    DEFAULT_GRID_POINTS
}

fn default_quad_points() -> usize {
    DEFAULT_QUAD_POINTS
}

fn default_z() -> f64 {
    1.96
}

fn default_halfline_scale() -> f64 {
    1.0
}

/// `maxent fit`: solve for the density matching given moments.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub support: SupportSpec,
    pub basis: MomentBasis,
    pub moments: Vec<f64>,
    #[serde(default)]
    pub solver: SolverOptions,
    #[serde(default = "default_grid_points")]
    pub grid_points: usize,
    #[serde(default = "default_quad_points")]
    pub quad_points: usize,
}

/// `maxent analyze`: estimate moments from a sample, fit, and quantify
/// the sample dependence of the reconstruction.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyzeConfig {
    pub support: SupportSpec,
    pub basis: MomentBasis,
    /// One-column CSV with header `x`.
    pub sample_csv: PathBuf,
    #[serde(default)]
    pub solver: SolverOptions,
    /// CLT band multiplier.
    #[serde(default = "default_z")]
    pub z: f64,
    #[serde(default = "default_grid_points")]
    pub grid_points: usize,
    #[serde(default = "default_quad_points")]
    pub quad_points: usize,
}

/// `maxent invert-laplace`: reconstruct a density on `[a, inf)` from
/// Laplace transform values.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InvertLaplaceConfig {
    /// Transform rates, strictly increasing.
    pub alphas: Vec<f64>,
    /// Transform values at those rates.
    pub values: Vec<f64>,
    /// Lower endpoint of the support.
    #[serde(default)]
    pub a: f64,
    /// Decay scale of the reference measure.
    #[serde(default = "default_halfline_scale")]
    pub halfline_scale: f64,
    #[serde(default)]
    pub solver: SolverOptions,
    #[serde(default = "default_grid_points")]
    pub grid_points: usize,
    #[serde(default = "default_quad_points")]
    pub quad_points: usize,
}
