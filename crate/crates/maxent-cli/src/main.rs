//! Command-line surface for maxent density reconstruction.
//!
//! Four workflows, each driven by a JSON config (schemas in `docs/`):
//!
//! * `fit` - solve for the maxent density matching given moments;
//! * `analyze` - estimate moments from a sample CSV, fit, and report
//!   the sample sensitivity of the reconstruction;
//! * `simulate` - run a seeded Monte Carlo replication experiment;
//! * `invert-laplace` - reconstruct a half-line density from Laplace
//!   transform values.
//!
//! Exit codes: 0 success, 1 config/input error, 2 infeasible moment
//! data, 3 solver failure (non-convergence or conditioning).

mod config;

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{ArgAction, Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

use config::{AnalyzeConfig, FitConfig, InvertLaplaceConfig};
use maxent::basis::{estimate_moments, sample_covariance, MomentVector, SampleSet};
use maxent::error::Error;
use maxent::experiment::{aggregate_json, run_replicates, write_replicates_csv, ExperimentConfig};
use maxent::laplace::invert_laplace;
use maxent::quad::QuadratureRule;
use maxent::sensitivity::SensitivityReport;
use maxent::solver::{fit, plot_grid, MaxentModel};

const EXIT_CONFIG: i32 = 1;
const EXIT_INFEASIBLE: i32 = 2;
const EXIT_SOLVER: i32 = 3;

#[derive(Parser)]
#[command(
    name = "maxent",
    version,
    about = "Maximum entropy density reconstruction from moment data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a maxent density to a moment vector
    Fit(CommonArgs),
    /// Estimate moments from a sample, fit, and quantify sensitivity
    Analyze(CommonArgs),
    /// Run a Monte Carlo replication experiment
    Simulate(CommonArgs),
    /// Reconstruct a half-line density from Laplace transform values
    InvertLaplace(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Path to the JSON config document
    #[arg(long)]
    config: PathBuf,
    /// Output directory for artifacts
    #[arg(long, default_value = "./out")]
    out: PathBuf,
    /// Override the density evaluation grid resolution
    #[arg(long)]
    grid_points: Option<usize>,
    /// Override the number of quadrature nodes
    #[arg(long)]
    quad_points: Option<usize>,
    /// Override the experiment seed
    #[arg(long)]
    seed: Option<u64>,
    /// Increase log verbosity (-v info, -vv debug)
    #[arg(long, short, action = ArgAction::Count)]
    verbose: u8,
}

struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn config(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::Input(_) | Error::Io(_) => EXIT_CONFIG,
            Error::Infeasible { .. } => EXIT_INFEASIBLE,
            Error::NonConvergence { .. }
            | Error::Conditioning { .. }
            | Error::Numeric { .. }
            | Error::SupportMismatch { .. }
            | Error::Envelope { .. } => EXIT_SOLVER,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure {
            code: EXIT_CONFIG,
            message: format!("i/o error: {e}"),
        }
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let args = match &cli.command {
        Command::Fit(a) | Command::Analyze(a) | Command::Simulate(a) | Command::InvertLaplace(a) => a,
    };
    init_logging(args.verbose);

    let result = match &cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::InvertLaplace(a) => cmd_invert_laplace(a),
    };
    if let Err(failure) = result {
        eprintln!("error: {}", failure.message);
        std::process::exit(failure.code);
    }
}

fn init_logging(verbosity: u8) {
    let level = match verbosity {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();
}

/// Reads and deserializes a config document, reporting the JSON path of
/// the first violation.
fn load_config<T: DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::config(format!("cannot read config {}: {e}", path.display())))?;
    let mut de = serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(&mut de)
        .map_err(|e| Failure::config(format!("config error at `{}`: {}", e.path(), e.inner())))
}

fn ensure_out_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir)
        .map_err(|e| Failure::config(format!("cannot create output dir {}: {e}", dir.display())))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), Failure> {
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut out, value)
        .map_err(|e| Failure::config(format!("cannot serialize {}: {e}", path.display())))?;
    out.write_all(b"\n")?;
    out.flush()?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn write_model_json(path: &Path, model: &MaxentModel) -> Result<(), Failure> {
    let value = serde_json::to_value(model)
        .map_err(|e| Failure::config(format!("cannot serialize model: {e}")))?;
    write_json(path, &value)
}

fn cmd_fit(args: &CommonArgs) -> Result<(), Failure> {
    let mut cfg: FitConfig = load_config(&args.config)?;
    if let Some(g) = args.grid_points {
        cfg.grid_points = g;
    }
    if let Some(q) = args.quad_points {
        cfg.quad_points = q;
    }
    let rule = QuadratureRule::gauss_legendre(cfg.support, cfg.quad_points)?;
    let d = MomentVector::new(cfg.moments.clone())?;
    d.screen_feasibility(&cfg.basis, &cfg.support)?;
    let model = fit(&d, &cfg.basis, &cfg.support, &rule, &cfg.solver)?;
    log::info!(
        "fit converged in {} iterations, grad norm {:.3e}",
        model.iterations,
        model.grad_norm
    );

    ensure_out_dir(&args.out)?;
    write_model_json(&args.out.join("model.json"), &model)?;
    let grid = plot_grid(&cfg.support, cfg.grid_points);
    let mut csv = BufWriter::new(File::create(args.out.join("density.csv"))?);
    model.write_density_csv(&grid, &mut csv)?;
    csv.flush()?;
    log::info!("wrote {}", args.out.join("density.csv").display());
    Ok(())
}

fn cmd_analyze(args: &CommonArgs) -> Result<(), Failure> {
    let mut cfg: AnalyzeConfig = load_config(&args.config)?;
    if let Some(g) = args.grid_points {
        cfg.grid_points = g;
    }
    if let Some(q) = args.quad_points {
        cfg.quad_points = q;
    }
    let file = File::open(&cfg.sample_csv).map_err(|e| {
        Failure::config(format!("cannot read sample {}: {e}", cfg.sample_csv.display()))
    })?;
    let sample = SampleSet::read_csv(
        BufReader::new(file),
        args.seed.unwrap_or_default(),
        &cfg.support,
    )?;
    log::info!("loaded {} sample values", sample.len());

    let d_hat = estimate_moments(&cfg.basis, &sample)?;
    let sigma_h = sample_covariance(&cfg.basis, &sample)?;
    let rule = QuadratureRule::gauss_legendre(cfg.support, cfg.quad_points)?;
    let model = fit(&d_hat, &cfg.basis, &cfg.support, &rule, &cfg.solver)?;
    let grid = plot_grid(&cfg.support, cfg.grid_points);
    let report = SensitivityReport::compute(&model, &rule, sigma_h, &grid)?;

    ensure_out_dir(&args.out)?;
    let moments = serde_json::to_value(&d_hat)
        .map_err(|e| Failure::config(format!("cannot serialize moments: {e}")))?;
    write_json(&args.out.join("moments.json"), &moments)?;
    write_model_json(&args.out.join("model.json"), &model)?;
    write_json(&args.out.join("sensitivity.json"), &report.to_json_value())?;
    let mut csv = BufWriter::new(File::create(args.out.join("band.csv"))?);
    report.write_band_csv(sample.len(), cfg.z, &mut csv)?;
    csv.flush()?;
    log::info!("wrote {}", args.out.join("band.csv").display());
    Ok(())
}

fn cmd_simulate(args: &CommonArgs) -> Result<(), Failure> {
    let mut cfg: ExperimentConfig = load_config(&args.config)?;
    if let Some(q) = args.quad_points {
        cfg.quad_points = q;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let result = run_replicates(&cfg)?;
    if !result.failures.is_empty() {
        log::warn!(
            "{} of {} replicate fits failed and were excluded",
            result.failures.len(),
            result.records.len() + result.failures.len()
        );
    }

    ensure_out_dir(&args.out)?;
    let mut csv = BufWriter::new(File::create(args.out.join("replicates.csv"))?);
    write_replicates_csv(&result, &mut csv)?;
    csv.flush()?;
    log::info!("wrote {}", args.out.join("replicates.csv").display());
    write_json(&args.out.join("aggregate.json"), &aggregate_json(&result))?;
    Ok(())
}

fn cmd_invert_laplace(args: &CommonArgs) -> Result<(), Failure> {
    let mut cfg: InvertLaplaceConfig = load_config(&args.config)?;
    if let Some(g) = args.grid_points {
        cfg.grid_points = g;
    }
    if let Some(q) = args.quad_points {
        cfg.quad_points = q;
    }
    let support = maxent::SupportSpec::half_line(cfg.a, cfg.halfline_scale)?;
    let inversion = invert_laplace(
        cfg.alphas.clone(),
        cfg.values.clone(),
        support,
        cfg.quad_points,
        &cfg.solver,
    )?;
    log::info!(
        "inversion converged in {} iterations, grad norm {:.3e}",
        inversion.model.iterations,
        inversion.model.grad_norm
    );

    ensure_out_dir(&args.out)?;
    // The model is fitted relative to the exponentially tilted reference
    // measure; record that next to the standard model fields.
    let mut model_doc = serde_json::to_value(&inversion.model)
        .map_err(|e| Failure::config(format!("cannot serialize model: {e}")))?;
    model_doc.as_object_mut().expect("model is an object").insert(
        "reference_measure".into(),
        serde_json::json!({"kind": "exp_tilted", "a": cfg.a, "scale": cfg.halfline_scale}),
    );
    write_json(&args.out.join("model.json"), &model_doc)?;

    let grid = plot_grid(&support, cfg.grid_points);
    let mut csv = BufWriter::new(File::create(args.out.join("density.csv"))?);
    writeln!(csv, "x,f")?;
    for &x in &grid {
        writeln!(csv, "{},{}", x, inversion.density(x))?;
    }
    csv.flush()?;
    log::info!("wrote {}", args.out.join("density.csv").display());
    Ok(())
}
