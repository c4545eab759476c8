//! End-to-end tests of the binary: exit-code protocol, artifact shapes,
//! and determinism of the outputs.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_maxent")
}

fn run(subcommand: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    Command::new(bin())
        .arg(subcommand)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(extra)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, json: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, json).unwrap();
    path
}

fn code(output: &Output) -> i32 {
    output.status.code().expect("no signal")
}

fn stderr(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

const FIT_UNIFORM: &str = r#"{
  "support": {"kind": "finite_interval", "a": 0.0, "b": 1.0},
  "basis": {"family": "powers", "exponents": [1]},
  "moments": [0.5]
}"#;

#[test]
fn fit_writes_model_and_density() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "fit.json", FIT_UNIFORM);
    let out = dir.path().join("out");
    let result = run("fit", &cfg, &out, &[]);
    assert_eq!(code(&result), 0, "{}", stderr(&result));

    let model: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("model.json")).unwrap()).unwrap();
    let lambda = model["lambda"][0].as_f64().unwrap();
    assert!(lambda.abs() < 1e-8, "lambda {lambda}");
    assert!(model["converged"].as_bool().unwrap());

    let density = fs::read_to_string(out.join("density.csv")).unwrap();
    let lines: Vec<&str> = density.lines().collect();
    assert_eq!(lines[0], "x,f");
    assert_eq!(lines.len(), 513); // header + default 512 grid points
    for line in &lines[1..] {
        let f: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert!((f - 1.0).abs() < 1e-8);
    }
}

#[test]
fn fit_skewed_mean_matches_frozen_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "fit.json",
        &FIT_UNIFORM.replace("[0.5]", "[0.3]"),
    );
    let out = dir.path().join("out");
    let result = run("fit", &cfg, &out, &["--grid-points", "16"]);
    assert_eq!(code(&result), 0, "{}", stderr(&result));
    let model: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("model.json")).unwrap()).unwrap();
    // Bisection on 1/l - 1/(e^l - 1) = 0.3 gives 2.6721043...
    let lambda = model["lambda"][0].as_f64().unwrap();
    assert!((lambda - 2.6721043).abs() < 1e-5, "lambda {lambda}");
    let density = fs::read_to_string(out.join("density.csv")).unwrap();
    assert_eq!(density.lines().count(), 17);
}

#[test]
fn fit_infeasible_mean_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "fit.json",
        &FIT_UNIFORM.replace("[0.5]", "[1.5]"),
    );
    let result = run("fit", &cfg, &dir.path().join("out"), &[]);
    assert_eq!(code(&result), 2, "{}", stderr(&result));
    assert!(stderr(&result).contains("infeasible"));
}

#[test]
fn malformed_config_exits_one_with_path() {
    let dir = tempfile::tempdir().unwrap();
    // Missing the moments field entirely.
    let cfg = write_config(
        dir.path(),
        "fit.json",
        r#"{"support": {"kind": "finite_interval", "a": 0.0, "b": 1.0},
            "basis": {"family": "powers", "exponents": [1]}}"#,
    );
    let result = run("fit", &cfg, &dir.path().join("out"), &[]);
    assert_eq!(code(&result), 1);
    assert!(stderr(&result).contains("config error at"), "{}", stderr(&result));

    // Unknown field is rejected, with its path named.
    let cfg = write_config(
        dir.path(),
        "fit2.json",
        &FIT_UNIFORM.replace("\"moments\"", "\"momnets\""),
    );
    let result = run("fit", &cfg, &dir.path().join("out"), &[]);
    assert_eq!(code(&result), 1);
    assert!(stderr(&result).contains("momnets"), "{}", stderr(&result));
}

#[test]
fn usage_error_exits_one() {
    let output = Command::new(bin())
        .args(["fit", "--no-such-flag"])
        .output()
        .unwrap();
    assert_eq!(code(&output), 1);
    let output = Command::new(bin()).arg("--help").output().unwrap();
    assert_eq!(code(&output), 0);
}

fn write_uniform_sample(path: &Path, n: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut csv = String::from("x\n");
    for _ in 0..n {
        csv.push_str(&format!("{}\n", rng.random::<f64>()));
    }
    fs::write(path, csv).unwrap();
}

fn analyze_config(dir: &Path, sample: &Path) -> PathBuf {
    write_config(
        dir,
        "analyze.json",
        &format!(
            r#"{{
  "support": {{"kind": "finite_interval", "a": 0.0, "b": 1.0}},
  "basis": {{"family": "powers", "exponents": [1]}},
  "sample_csv": "{}"
}}"#,
            sample.display()
        ),
    )
}

#[test]
fn analyze_writes_sensitivity_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let sample = dir.path().join("sample.csv");
    let n = 10_000;
    write_uniform_sample(&sample, n, 31);
    let cfg = analyze_config(dir.path(), &sample);

    let out = dir.path().join("out");
    let result = run("analyze", &cfg, &out, &[]);
    assert_eq!(code(&result), 0, "{}", stderr(&result));

    let moments: Vec<f64> =
        serde_json::from_str(&fs::read_to_string(out.join("moments.json")).unwrap()).unwrap();
    assert_eq!(moments.len(), 1);
    assert!((moments[0] - 0.5).abs() < 0.02);

    let sens: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("sensitivity.json")).unwrap()).unwrap();
    assert!(sens["c"].is_array() && sens["d"].is_array() && sens["sigma_h"].is_array());

    // Band half-width at x = 1 is about 1.96 sqrt(3/N) for the uniform
    // sample (sigma^2(1) = 3 up to sampling noise in Sigma(h)).
    let band = fs::read_to_string(out.join("band.csv")).unwrap();
    let last = band.lines().last().unwrap();
    let cols: Vec<f64> = last.split(',').map(|v| v.parse().unwrap()).collect();
    let half = (cols[4] - cols[3]) / 2.0;
    let expected = 1.96 * (3.0f64 / n as f64).sqrt();
    assert!(
        (half - expected).abs() < 0.1 * expected,
        "half width {half} vs {expected}"
    );

    // Same inputs, same bytes.
    let out2 = dir.path().join("out2");
    let result = run("analyze", &cfg, &out2, &[]);
    assert_eq!(code(&result), 0);
    for artifact in ["moments.json", "model.json", "sensitivity.json", "band.csv"] {
        assert_eq!(
            fs::read(out.join(artifact)).unwrap(),
            fs::read(out2.join(artifact)).unwrap(),
            "{artifact} differs between runs"
        );
    }
}

#[test]
fn analyze_single_observation_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let sample = dir.path().join("sample.csv");
    fs::write(&sample, "x\n0.5\n").unwrap();
    let cfg = analyze_config(dir.path(), &sample);
    let result = run("analyze", &cfg, &dir.path().join("out"), &[]);
    assert_eq!(code(&result), 1);
    assert!(stderr(&result).contains("at least 2"));
}

#[test]
fn analyze_out_of_support_rows_listed() {
    let dir = tempfile::tempdir().unwrap();
    let sample = dir.path().join("sample.csv");
    fs::write(&sample, "x\n0.5\n1.75\n0.25\n").unwrap();
    let cfg = analyze_config(dir.path(), &sample);
    let result = run("analyze", &cfg, &dir.path().join("out"), &[]);
    assert_eq!(code(&result), 1);
    assert!(stderr(&result).contains("rows [3]"), "{}", stderr(&result));
}

const SIMULATE_MINIMAL: &str = r#"{
  "true_density": {"kind": "uniform", "support": {"kind": "finite_interval", "a": 0.0, "b": 1.0}},
  "basis": {"family": "powers", "exponents": [1]},
  "n_grid": [100],
  "replicates": 2,
  "seed": 42,
  "grid_points": [0.0, 0.5, 1.0]
}"#;

#[test]
fn simulate_minimal_artifact_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "sim.json", SIMULATE_MINIMAL);
    let out = dir.path().join("out");
    let result = run("simulate", &cfg, &out, &[]);
    assert_eq!(code(&result), 0, "{}", stderr(&result));

    let csv = fs::read_to_string(out.join("replicates.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines[0],
        "N,replicate,d_hat_1,lambda_hat_1,l1_err,kl,sup_err,chan1_resid"
    );
    assert_eq!(lines.len(), 3);

    let agg: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("aggregate.json")).unwrap()).unwrap();
    assert_eq!(agg["aggregates"].as_array().unwrap().len(), 1);
    // Slope fields are present (null with a single sample size).
    assert!(agg.as_object().unwrap().contains_key("l1_median_slope"));
    assert!(agg["failure_rate"].as_f64().unwrap() == 0.0);
}

#[test]
fn simulate_multi_n_reports_slopes_and_seed_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "sim.json",
        &SIMULATE_MINIMAL
            .replace("[100]", "[100, 400, 1600]")
            .replace("\"replicates\": 2", "\"replicates\": 40"),
    );
    let out = dir.path().join("out");
    let result = run("simulate", &cfg, &out, &["--seed", "7"]);
    assert_eq!(code(&result), 0, "{}", stderr(&result));
    let agg: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("aggregate.json")).unwrap()).unwrap();
    assert_eq!(agg["config"]["seed"].as_u64().unwrap(), 7);
    let slope = agg["l1_median_slope"].as_f64().unwrap();
    assert!(slope < -0.2 && slope > -0.9, "slope {slope}");
}

#[test]
fn simulate_reference_fit_failure_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    // A solver capped at zero iterations cannot fit the skewed reference
    // moments, so the experiment aborts before any replicates run.
    let cfg = write_config(
        dir.path(),
        "sim.json",
        r#"{
  "true_density": {"kind": "truncated_exponential", "rate": 2.0,
                   "support": {"kind": "finite_interval", "a": 0.0, "b": 1.0}},
  "basis": {"family": "powers", "exponents": [1]},
  "n_grid": [100],
  "replicates": 2,
  "seed": 1,
  "solver": {"max_iter": 0}
}"#,
    );
    let result = run("simulate", &cfg, &dir.path().join("out"), &[]);
    assert_eq!(code(&result), 3, "{}", stderr(&result));
}

#[test]
fn simulate_missing_density_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "sim.json",
        r#"{"basis": {"family": "powers", "exponents": [1]},
            "n_grid": [100], "replicates": 2, "seed": 1}"#,
    );
    let result = run("simulate", &cfg, &dir.path().join("out"), &[]);
    assert_eq!(code(&result), 1);
    assert!(stderr(&result).contains("true_density"), "{}", stderr(&result));
}

const INVERT_EXACT: &str = r#"{
  "alphas": [0.5, 1.0, 2.0],
  "values": [0.6666666666666666, 0.5, 0.3333333333333333]
}"#;

#[test]
fn invert_laplace_recovers_unit_exponential() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "inv.json", INVERT_EXACT);
    let out = dir.path().join("out");
    let result = run("invert-laplace", &cfg, &out, &[]);
    assert_eq!(code(&result), 0, "{}", stderr(&result));

    let model: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("model.json")).unwrap()).unwrap();
    assert_eq!(model["reference_measure"]["kind"], "exp_tilted");
    assert!(model["converged"].as_bool().unwrap());

    // Trapezoid L1 distance to exp(-x) over the exported grid, x <= 10.
    let density = fs::read_to_string(out.join("density.csv")).unwrap();
    let pts: Vec<(f64, f64)> = density
        .lines()
        .skip(1)
        .map(|l| {
            let mut it = l.split(',');
            (
                it.next().unwrap().parse().unwrap(),
                it.next().unwrap().parse().unwrap(),
            )
        })
        .filter(|&(x, _)| x <= 10.0)
        .collect();
    let mut l1 = 0.0;
    for w in pts.windows(2) {
        let g0 = (w[0].1 - (-w[0].0).exp()).abs();
        let g1 = (w[1].1 - (-w[1].0).exp()).abs();
        l1 += 0.5 * (w[1].0 - w[0].0) * (g0 + g1);
    }
    assert!(l1 <= 0.05, "L1 distance {l1}");
}

#[test]
fn invert_laplace_single_value() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "inv.json",
        r#"{"alphas": [1.0], "values": [0.5]}"#,
    );
    let out = dir.path().join("out");
    let result = run("invert-laplace", &cfg, &out, &[]);
    assert_eq!(code(&result), 0, "{}", stderr(&result));
    let model: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("model.json")).unwrap()).unwrap();
    assert!(model["grad_norm"].as_f64().unwrap() <= 1e-10);
}

#[test]
fn invert_laplace_infeasible_values_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "inv.json",
        r#"{"alphas": [0.5, 1.0], "values": [0.3, 0.5]}"#,
    );
    let result = run("invert-laplace", &cfg, &dir.path().join("out"), &[]);
    assert_eq!(code(&result), 2, "{}", stderr(&result));
}

/// Fitting to the moments reproduced from a previous fit's density
/// recovers the original multipliers.
#[test]
fn fit_round_trip_recovers_multipliers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "fit.json",
        &FIT_UNIFORM.replace("[0.5]", "[0.3]"),
    );
    let out = dir.path().join("out");
    let result = run("fit", &cfg, &out, &[]);
    assert_eq!(code(&result), 0);

    let model: maxent::MaxentModel =
        serde_json::from_str(&fs::read_to_string(out.join("model.json")).unwrap()).unwrap();
    let rule = maxent::QuadratureRule::gauss_legendre(model.support, 128).unwrap();
    let reproduced = model.reproduced_moments(&rule).unwrap();

    let cfg2 = write_config(
        dir.path(),
        "fit2.json",
        &FIT_UNIFORM.replace("[0.5]", &format!("[{}]", reproduced[0])),
    );
    let out2 = dir.path().join("out2");
    let result = run("fit", &cfg2, &out2, &[]);
    assert_eq!(code(&result), 0);
    let model2: maxent::MaxentModel =
        serde_json::from_str(&fs::read_to_string(out2.join("model.json")).unwrap()).unwrap();
    assert!(
        (model.lambda[0] - model2.lambda[0]).abs() <= 1e-6,
        "{} vs {}",
        model.lambda[0],
        model2.lambda[0]
    );
}
