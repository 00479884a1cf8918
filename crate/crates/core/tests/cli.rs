//! End-to-end tests of the command-line interface, driving the built binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ipreg"))
}

fn tmp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("ipreg-cli-{tag}-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

fn orange_csv() -> &'static str {
    include_str!("../data/orange.csv")
}

const ORANGE_CONFIG: &str = r#"
response = "circ"
interactions = ["1:2"]

[[covariate]]
name = "age"
kernel = "linear"

[[covariate]]
name = "tree"
kernel = "pearson"
type = "categorical"
"#;

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn fit_orange_em_prints_golden_summary() {
    let dir = tmp_dir("fit-orange");
    let data = dir.join("orange.csv");
    let config = dir.join("model.toml");
    let artifact = dir.join("fit.json");
    write(&data, orange_csv());
    write(&config, ORANGE_CONFIG);

    let out = run(bin()
        .args(["fit", "--method", "em", "--maxit", "5000", "--stop-crit", "1e-8", "--silent"])
        .arg("--data")
        .arg(&data)
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(&artifact));
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    let ll_line = text
        .lines()
        .find(|l| l.starts_with("Log-likelihood value:"))
        .expect("summary contains the log-likelihood");
    let ll: f64 = ll_line.split(':').nth(1).unwrap().trim().parse().unwrap();
    assert!((ll - (-160.66)).abs() < 0.05, "log-likelihood {ll}");
    assert!(text.contains("Linear (age)"));
    assert!(text.contains("Pearson (tree)"));
    assert!(text.contains("RMSE of prediction:"));
    assert!(artifact.exists());
}

#[test]
fn fixed_method_without_theta_is_usage_error() {
    let dir = tmp_dir("fixed-usage");
    let data = dir.join("orange.csv");
    let config = dir.join("model.toml");
    write(&data, orange_csv());
    write(&config, ORANGE_CONFIG);
    let out = run(bin()
        .args(["fit", "--method", "fixed", "--silent"])
        .arg("--data")
        .arg(&data)
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(dir.join("fit.json")));
    assert_eq!(out.status.code(), Some(2), "usage errors exit with 2");
}

#[test]
fn data_errors_exit_with_3() {
    let dir = tmp_dir("data-err");
    let data = dir.join("orange.csv");
    let config = dir.join("model.toml");
    write(&data, orange_csv());
    write(&config, ORANGE_CONFIG.replace("circ", "missing_column").as_str());
    let out = run(bin()
        .args(["fit", "--silent"])
        .arg("--data")
        .arg(&data)
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(dir.join("fit.json")));
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn same_seed_gives_byte_identical_artifacts() {
    let dir = tmp_dir("determinism");
    let data = dir.join("orange.csv");
    let config = dir.join("model.toml");
    write(&data, orange_csv());
    write(&config, ORANGE_CONFIG);
    for tag in ["a", "b"] {
        let out = run(bin()
            .args(["fit", "--method", "direct", "--maxit", "50", "--seed", "7", "--silent"])
            .arg("--data")
            .arg(&data)
            .arg("--config")
            .arg(&config)
            .arg("--out")
            .arg(dir.join(format!("fit-{tag}.json"))));
        assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    }
    let a = std::fs::read(dir.join("fit-a.json")).unwrap();
    let b = std::fs::read(dir.join("fit-b.json")).unwrap();
    assert_eq!(a, b, "same seed must give byte-identical artifacts");
}

#[test]
fn predict_on_training_matches_training_rmse() {
    let dir = tmp_dir("predict");
    let data = dir.join("orange.csv");
    let config = dir.join("model.toml");
    let artifact = dir.join("fit.json");
    write(&data, orange_csv());
    write(&config, ORANGE_CONFIG);
    let out = run(bin()
        .args(["fit", "--method", "em", "--maxit", "5000", "--silent"])
        .arg("--data")
        .arg(&data)
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(&artifact));
    assert!(out.status.success());
    let summary = stdout(&out);
    let training_rmse: f64 = summary
        .lines()
        .find(|l| l.starts_with("RMSE of prediction:"))
        .unwrap()
        .split_whitespace()
        .nth(3)
        .unwrap()
        .parse()
        .unwrap();

    let out = run(bin()
        .args(["predict", "--truth", "circ"])
        .arg("--artifact")
        .arg(&artifact)
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(dir.join("pred.csv")));
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    let test_rmse: f64 = text
        .lines()
        .find(|l| l.starts_with("Test RMSE:"))
        .unwrap()
        .split_whitespace()
        .nth(2)
        .unwrap()
        .parse()
        .unwrap();
    assert!(
        (test_rmse - training_rmse).abs() < 1e-9,
        "prediction on the training file must reproduce the training RMSE"
    );

    // Artifact round trip: predicting twice gives identical bytes.
    let out2 = run(bin()
        .args(["predict"])
        .arg("--artifact")
        .arg(&artifact)
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(dir.join("pred2.csv")));
    assert!(out2.status.success());
    let p1 = std::fs::read_to_string(dir.join("pred.csv")).unwrap();
    let p2 = std::fs::read_to_string(dir.join("pred2.csv")).unwrap();
    assert_eq!(p1, p2);
}

#[test]
fn alpha_widens_intervals() {
    let dir = tmp_dir("alpha");
    let data = dir.join("orange.csv");
    let config = dir.join("model.toml");
    let artifact = dir.join("fit.json");
    write(&data, orange_csv());
    write(&config, ORANGE_CONFIG);
    assert!(run(bin()
        .args(["fit", "--method", "em", "--maxit", "2000", "--silent"])
        .arg("--data")
        .arg(&data)
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(&artifact))
    .status
    .success());

    let mut widths = Vec::new();
    for alpha in ["0.05", "0.10"] {
        let out = run(bin()
            .args(["predict", "--alpha", alpha])
            .arg("--artifact")
            .arg(&artifact)
            .arg("--data")
            .arg(&data));
        assert!(out.status.success());
        let body = stdout(&out);
        let w: Vec<f64> = body
            .lines()
            .skip(1)
            .filter(|l| !l.is_empty() && !l.starts_with("Test"))
            .map(|l| {
                let f: Vec<f64> = l.split(',').map(|v| v.parse().unwrap()).collect();
                f[2] - f[1]
            })
            .collect();
        widths.push(w);
    }
    for (w05, w10) in widths[0].iter().zip(&widths[1]) {
        assert!(w05 > w10, "0.05-level intervals must be pointwise wider");
    }
}

#[test]
fn simulate_writes_deterministic_csv() {
    let dir = tmp_dir("simulate");
    for tag in ["a", "b"] {
        let out = run(bin()
            .args(["simulate", "--n", "10", "--seed", "3"])
            .arg("--out")
            .arg(dir.join(format!("sim-{tag}.csv"))));
        assert!(out.status.success());
    }
    let a = std::fs::read(dir.join("sim-a.csv")).unwrap();
    let b = std::fs::read(dir.join("sim-b.csv")).unwrap();
    assert_eq!(a, b);
    let text = String::from_utf8(a).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 11, "header plus 10 rows");
    assert_eq!(lines[0], "y,X");
}

#[test]
fn kernel_defaults_and_spec_strings() {
    let dir = tmp_dir("kernel");
    let data = dir.join("d.csv");
    write(&data, "x\n0.0\n1.0\n2.0\n");

    //

    // se diagonal is 1 before centring.
    let out = run(bin()
        .args(["kernel", "--covariate", "x", "--kernel", "se,0.5"])
        .arg("--data")
        .arg(&data));
    assert!(out.status.success());
    let body = stdout(&out);
    let rows: Vec<&str> = body.lines().collect();
    assert_eq!(rows.len(), 4);
    for (i, line) in rows[1..].iter().enumerate() {
        let vals: Vec<f64> = line.split(',').map(|v| v.parse().unwrap()).collect();
        assert!((vals[i] - 1.0).abs() < 1e-12);
    }

    // fbm default Hurst 0.5: entry (1,2) for x = (0,1,2) is
    // -(|0-1| - 0 - 1)/2 = 0... with x1=0: h(0,1) = -(1 - 0 - 1)/2 = 0;
    // check h(2,1) = -(1 - 2 - 1)/2 = 1 instead.
    let out = run(bin()
        .args(["kernel", "--covariate", "x", "--kernel", "fbm"])
        .arg("--data")
        .arg(&data));
    assert!(out.status.success());
    let body = stdout(&out);
    let second: Vec<f64> =
        body.lines().nth(2).unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    let third: Vec<f64> =
        body.lines().nth(3).unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert!((third[1] - 1.0).abs() < 1e-12, "fbm default gamma=0.5 gives h(2,1)=1");
    assert!((second[0] - 0.0).abs() < 1e-12);

    // poly3,1 equals (x_i x_j + 1)^3 with lambda = 1.
    let out = run(bin()
        .args(["kernel", "--covariate", "x", "--kernel", "poly3,1"])
        .arg("--data")
        .arg(&data));
    assert!(out.status.success());
    let body = stdout(&out);
    let third: Vec<f64> =
        body.lines().nth(3).unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert!((third[2] - 125.0).abs() < 1e-9, "(2*2+1)^3 = 125, got {}", third[2]);

    // Malformed spec string is a usage error.
    let out = run(bin()
        .args(["kernel", "--covariate", "x", "--kernel", "nope,1"])
        .arg("--data")
        .arg(&data));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn check_theta_prints_layout() {
    let dir = tmp_dir("check-theta");
    let data = dir.join("orange.csv");
    let config = dir.join("model.toml");
    write(&data, orange_csv());
    write(
        &config,
        r#"
response = "circ"

[[covariate]]
name = "age"
kernel = "fbm"

[[covariate]]
name = "tree"
type = "categorical"

[options]
est_hurst = true
"#,
    );
    let out = run(bin()
        .args(["check-theta"])
        .arg("--data")
        .arg(&data)
        .arg("--config")
        .arg(&config));
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("theta consists of 4:"), "{text}");
    assert!(text.contains("lambda[1], lambda[2], qnorm(hurst[1]), log(psi)"), "{text}");
}

#[test]
fn plot_data_csv_has_expected_shapes() {
    let dir = tmp_dir("plot");
    let data = dir.join("orange.csv");
    let config = dir.join("model.toml");
    let artifact = dir.join("fit.json");
    write(&data, orange_csv());
    write(&config, ORANGE_CONFIG);
    assert!(run(bin()
        .args(["fit", "--method", "em", "--maxit", "500", "--silent"])
        .arg("--data")
        .arg(&data)
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(&artifact))
    .status
    .success());

    let out = run(bin()
        .args(["plot", "--kind", "iter"])
        .arg("--artifact")
        .arg(&artifact));
    assert!(out.status.success());
    let iter_body = stdout(&out);
    assert!(iter_body.lines().count() > 2);
    assert!(iter_body.starts_with("iteration,loglik"));

    let out = run(bin()
        .args(["plot", "--kind", "fitted"])
        .arg("--artifact")
        .arg(&artifact));
    assert!(out.status.success());
    // 200 grid points per tree level (5 levels) plus the header.
    assert_eq!(stdout(&out).lines().count(), 1 + 5 * 200);

    let out = run(bin()
        .args(["plot", "--kind", "ppc", "--seed", "9"])
        .arg("--artifact")
        .arg(&artifact));
    assert!(out.status.success());
    let ppc = stdout(&out);
    assert_eq!(ppc.lines().count(), 1 + 35);
    assert_eq!(ppc.lines().next().unwrap().split(',').count(), 51);
}

#[test]
fn nystrom_fit_runs_direct_and_rejects_em() {
    let dir = tmp_dir("nystrom");
    let data = dir.join("sim.csv");
    let config = dir.join("model.toml");
    assert!(run(bin()
        .args(["simulate", "--n", "80", "--seed", "11"])
        .arg("--out")
        .arg(&data))
    .status
    .success());
    write(
        &config,
        r#"
response = "y"

[[covariate]]
name = "X"
kernel = "fbm"

[options]
nystrom = 12
nys_seed = 4
"#,
    );
    let out = run(bin()
        .args(["fit", "--method", "em", "--silent"])
        .arg("--data")
        .arg(&data)
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(dir.join("f.json")));
    assert_eq!(out.status.code(), Some(2), "EM under nystrom is rejected");

    let out = run(bin()
        .args(["fit", "--method", "direct", "--silent", "--seed", "2"])
        .arg("--data")
        .arg(&data)
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(dir.join("f.json")));
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert!(text.contains("Log-likelihood value:"));
}
