//! Command-line front end: CSV ingestion, model-spec configuration,
//! fit/predict/simulate/kernel/check-theta/plot commands, and persisted fit
//! artifacts.
//!
//! Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.

pub mod artifact;
pub mod config;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;

use crate::data::{DataColumn, DataTable};
use crate::error::{Error, Result};
use crate::estimation::{self, ControlOptions, FitResult, Method, SeOutcome};
use crate::kernels::kern_for_spec;
use crate::model::{load_model, LoadedModel, Role};
use crate::posterior::{self, PlotKind};
use crate::simulate::{gen_smooth, SimConfig};

use artifact::{fnv1a_hex, FitArtifact};
use config::{parse_kernel_string, parse_model_config};

/// Environment variable overriding the restart worker count.
pub const CORES_ENV: &str = "IPREG_NUM_THREADS";

#[derive(Parser, Debug)]
#[command(
    name = "ipreg",
    version,
    about = "I-prior regression: kernel loading, maximum-likelihood estimation and prediction"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Estimate an I-prior model from a CSV file and a model config.
    Fit(FitArgs),
    /// Predict from a saved fit artifact at new covariate values.
    Predict(PredictArgs),
    /// Generate data from the built-in smooth benchmark regression.
    Simulate(SimulateArgs),
    /// Dump the (optionally centred) Gram matrix of one covariate as CSV.
    Kernel(KernelArgs),
    /// Show the unconstrained hyperparameter layout of a model.
    CheckTheta(CheckThetaArgs),
    /// Emit the data behind a diagnostic plot as CSV.
    Plot(PlotArgs),
}

#[derive(Args, Debug)]
struct FitArgs {
    /// Training data (CSV with a header row).
    #[arg(long)]
    data: PathBuf,
    /// Model configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Estimation method: direct, em, mixed or fixed.
    #[arg(long, default_value = "direct")]
    method: String,
    /// Hyperparameters in theta (transformed) space, comma-separated;
    /// the starting point, or the values to use with --method fixed.
    #[arg(long)]
    theta: Option<String>,
    #[arg(long, default_value_t = 100)]
    maxit: usize,
    #[arg(long, default_value_t = 5)]
    em_maxit: usize,
    #[arg(long, default_value_t = 1e-8)]
    stop_crit: f64,
    /// Random restarts (0 = off).
    #[arg(long, default_value_t = 0)]
    restarts: usize,
    /// Worker threads for restarts (defaults to the machine's cores, or the
    /// IPREG_NUM_THREADS environment variable).
    #[arg(long)]
    no_cores: Option<usize>,
    #[arg(long, default_value_t = 5)]
    par_maxit: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Suppress progress reporting on standard error.
    #[arg(long)]
    silent: bool,
    /// Where to write the fit artifact (JSON).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PredictArgs {
    /// Fit artifact written by `fit`.
    #[arg(long)]
    artifact: PathBuf,
    /// New covariate values (CSV with a header row).
    #[arg(long)]
    data: PathBuf,
    /// Credibility level for the intervals.
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Column in the data holding the true responses; prints the test RMSE.
    #[arg(long)]
    truth: Option<String>,
    /// Output CSV (defaults to standard output).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long)]
    n: usize,
    /// Domain of the covariate, two numbers.
    #[arg(long, num_args = 2, value_names = ["LO", "HI"], default_values_t = [-1.0, 5.5])]
    xlim: Vec<f64>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Constant offset of the mean function.
    #[arg(long, default_value_t = 1.0)]
    const_offset: f64,
    #[arg(long, default_value_t = 0.9)]
    noise_sd: f64,
    /// Output CSV (defaults to standard output).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct KernelArgs {
    #[arg(long)]
    data: PathBuf,
    /// Covariate column (or functional prefix with --functional).
    #[arg(long)]
    covariate: String,
    /// Kernel spec string, e.g. "linear", "fbm,0.7", "se,0.5", "poly3,1".
    #[arg(long, default_value = "linear")]
    kernel: String,
    /// Treat the covariate as categorical (labels).
    #[arg(long)]
    categorical: bool,
    /// Gather columns sharing the prefix into one functional covariate.
    #[arg(long)]
    functional: bool,
    /// Centre the kernel matrix.
    #[arg(long)]
    centre: bool,
    /// Output CSV (defaults to standard output).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CheckThetaArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args, Debug)]
struct PlotArgs {
    #[arg(long)]
    artifact: PathBuf,
    /// One of fitted, resid, iter, ppc.
    #[arg(long)]
    kind: String,
    /// Seed for the posterior predictive draws (ppc kind).
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV (defaults to standard output).
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Run the CLI; returns the process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Fit(args) => cmd_fit(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Kernel(args) => cmd_kernel(args),
        Command::CheckTheta(args) => cmd_check_theta(args),
        Command::Plot(args) => cmd_plot(args),
    }
}

fn write_output(path: Option<&Path>, content: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, content)?,
        None => {
            std::io::stdout().write_all(content.as_bytes())?;
        }
    }
    Ok(())
}

fn parse_theta(s: &str) -> Result<DVector<f64>> {
    let vals: Vec<f64> = s
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::Parse(format!("theta entry `{v}` is not a number")))
        })
        .collect::<Result<_>>()?;
    Ok(DVector::from_vec(vals))
}

fn default_cores() -> usize {
    if let Ok(v) = std::env::var(CORES_ENV) {
        if let Ok(n) = v.parse::<usize>() {
            if n >= 1 {
                return n;
            }
        }
    }
    std::thread::available_parallelism().map_or(1, |c| c.get())
}

fn cmd_fit(args: FitArgs) -> Result<()> {
    let bytes = std::fs::read(&args.data)?;
    let table = DataTable::from_csv_reader(bytes.as_slice())?;
    let spec = parse_model_config(&std::fs::read_to_string(&args.config)?)?;
    let model = Arc::new(load_model(&spec, &table)?);
    let method: Method = args.method.parse()?;
    let theta0 = args.theta.as_deref().map(parse_theta).transpose()?;
    if method == Method::Fixed && theta0.is_none() && !model.layout.is_empty() {
        return Err(Error::InvalidParam(
            "--method fixed needs --theta values for the estimable hyperparameters".into(),
        ));
    }
    let control = ControlOptions {
        maxit: args.maxit,
        em_maxit: args.em_maxit,
        stop_crit: args.stop_crit,
        theta0,
        restarts: args.restarts,
        no_cores: args.no_cores.unwrap_or_else(default_cores),
        par_maxit: args.par_maxit,
        silent: args.silent,
        seed: args.seed,
    };
    let fit = estimation::fit(&model, method, &control)?;
    let artifact = FitArtifact::from_fit(&fit, Some(fnv1a_hex(&bytes)));
    artifact.save(&args.out)?;
    print!("{}", summary_text(&fit)?);
    Ok(())
}

fn five_number_summary(v: &[f64]) -> (f64, f64, f64, f64, f64) {
    let mut s: Vec<f64> = v.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q = |p: f64| -> f64 {
        // Linear interpolation between order statistics.
        let h = p * (s.len() - 1) as f64;
        let lo = h.floor() as usize;
        let hi = h.ceil() as usize;
        s[lo] + (h - h.floor()) * (s[hi] - s[lo])
    };
    (s[0], q(0.25), q(0.5), q(0.75), s[s.len() - 1])
}

fn format_p(p: f64) -> String {
    if p < 2e-16 {
        "<2e-16".to_string()
    } else if p < 0.001 {
        format!("{p:.1e}")
    } else {
        format!("{p:.3}")
    }
}

/// Human-readable fit summary: kernels per covariate, the hyperparameter
/// table, convergence info, log-likelihood and training RMSE.
pub fn summary_text(fit: &FitResult) -> Result<String> {
    let model = &fit.model;
    let mut out = String::new();
    out += &format!("Sample size: {}\n", model.n);
    out += &format!("Object size: {:.1} kB\n\n", model.gram_bytes() as f64 / 1000.0);
    out += "RKHS used:\n";
    for (cspec, kern) in fit.model.spec.covariates.iter().zip(&fit.model.kernels) {
        out += &format!("{} ({})\n", kern.display_name(), cspec.name);
    }
    out += "\n";

    let resid = posterior::residuals(fit)?;
    let (min, q1, med, q3, max) = five_number_summary(resid.as_slice());
    out += "Residuals:\n";
    out += "    Min.  1st Qu.   Median  3rd Qu.     Max.\n";
    out += &format!("{min:8.4} {q1:8.4} {med:8.4} {q3:8.4} {max:8.4}\n\n");

    out += "Hyperparameters:\n";
    match fit.se.as_ref() {
        Some(SeOutcome::Available(entries)) => {
            out += &format!(
                "{:<12} {:>10} {:>10} {:>8} {:>9}\n",
                "", "Estimate", "S.E.", "z", "P[|Z>z|]"
            );
            for e in entries {
                out += &format!(
                    "{:<12} {:>10.4} {:>10.4} {:>8.3} {:>9}\n",
                    e.name,
                    e.estimate,
                    e.se,
                    e.z,
                    format_p(e.p_value)
                );
            }
        }
        Some(SeOutcome::Unavailable(msg)) => {
            out += &format!("{:<12} {:>10}\n", "", "Estimate");
            for (name, value) in fit.coef() {
                out += &format!("{name:<12} {value:>10.4}\n");
            }
            out += &format!("Standard errors unavailable: {msg}\n");
        }
        None => {
            out += &format!("{:<12} {:>10}\n", "", "Estimate");
            for (name, value) in posterior::get_hyp(fit) {
                out += &format!("{name:<12} {value:>10.4}\n");
            }
        }
    }
    out += "\n";
    out += &format!("Estimation method: {}. Iterations: {}\n", fit.method.name(), fit.iterations);
    out += &format!("Convergence: {}\n", fit.message);
    out += &format!("Log-likelihood value: {:.4}\n", fit.log_lik);
    let rmse = posterior::get_prederror(fit)?;
    out += &format!("RMSE of prediction: {rmse:.6} (Training)\n");
    out += &format!("Time taken: {:.3} s\n", fit.wall.as_secs_f64());
    Ok(out)
}

fn cmd_predict(args: PredictArgs) -> Result<()> {
    let artifact = FitArtifact::load(&args.artifact)?;
    let fit = artifact.rebuild()?;
    let table = DataTable::from_csv_path(&args.data)?;
    let truth: Option<Vec<f64>> = match &args.truth {
        Some(col) => match table.require_column(col)? {
            DataColumn::Numeric(v) => Some(v.clone()),
            _ => return Err(Error::NonNumeric(col.clone())),
        },
        None => None,
    };
    let pred = posterior::predict(&fit, &table, true, args.alpha, truth.as_deref())?;
    let mut csv = String::from("point,lower,upper\n");
    let lower = pred.lower.as_ref().expect("intervals always requested");
    let upper = pred.upper.as_ref().expect("intervals always requested");
    for i in 0..pred.mean.len() {
        csv += &format!("{},{},{}\n", pred.mean[i], lower[i], upper[i]);
    }
    write_output(args.out.as_deref(), &csv)?;
    if let Some(rmse) = pred.rmse {
        println!("Test RMSE: {rmse:.6}");
    }
    Ok(())
}

fn cmd_simulate(args: SimulateArgs) -> Result<()> {
    let cfg = SimConfig {
        n: args.n,
        xlim: (args.xlim[0], args.xlim[1]),
        seed: args.seed,
        const_offset: args.const_offset,
        noise_sd: args.noise_sd,
    };
    let (xs, ys) = gen_smooth(&cfg)?;
    let mut csv = String::from("y,X\n");
    for i in 0..xs.len() {
        csv += &format!("{},{}\n", ys[i], xs[i]);
    }
    write_output(args.out.as_deref(), &csv)?;
    Ok(())
}

// Column resolution shared with the model loader's coercion rules.
fn resolve_covariate_column(
    cspec: &crate::model::CovariateSpec,
    raw: &DataColumn,
) -> Result<crate::kernels::CovariateColumn> {
    use crate::kernels::{CategoricalColumn, CovariateColumn};
    let col = match (cspec.role, raw) {
        (Role::Categorical, DataColumn::Categorical(labels)) => {
            CovariateColumn::Categorical(CategoricalColumn::from_labels(labels))
        }
        (Role::Categorical, DataColumn::Numeric(v)) => {
            let labels: Vec<String> = v.iter().map(|&x| crate::data::numeric_label(x)).collect();
            CovariateColumn::Categorical(CategoricalColumn::from_labels(&labels))
        }
        (Role::Functional, DataColumn::Matrix(m)) => CovariateColumn::Functional(m.clone()),
        (Role::Auto, DataColumn::Categorical(labels)) => {
            CovariateColumn::Categorical(CategoricalColumn::from_labels(labels))
        }
        (Role::Auto, DataColumn::Numeric(v)) => {
            CovariateColumn::Continuous(nalgebra::DMatrix::from_column_slice(v.len(), 1, v))
        }
        (Role::Auto, DataColumn::Matrix(m)) => CovariateColumn::Continuous(m.clone()),
        _ => {
            return Err(Error::Data(format!(
                "covariate `{}`: column type incompatible with the declared role",
                cspec.name
            )))
        }
    };
    col.validate()?;
    Ok(col)
}

fn cmd_kernel(args: KernelArgs) -> Result<()> {
    let table = DataTable::from_csv_path(&args.data)?;
    let spec = parse_kernel_string(&args.kernel)?;
    let role = if args.categorical {
        Role::Categorical
    } else if args.functional {
        Role::Functional
    } else {
        Role::Auto
    };
    let cspec =
        crate::model::CovariateSpec { name: args.covariate.clone(), kernel: Some(spec.clone()), role };
    let raw = match role {
        Role::Functional => DataColumn::Matrix(table.gather_prefix(&args.covariate)?),
        _ => table.require_column(&args.covariate)?.clone(),
    };
    let col = resolve_covariate_column(&cspec, &raw)?;
    let gram = kern_for_spec(&spec, &col, None, 1.0, args.centre)?;
    let n = gram.values.ncols();
    let mut csv = String::new();
    csv += &(1..=n).map(|j| format!("k{j}")).collect::<Vec<_>>().join(",");
    csv += "\n";
    for i in 0..gram.values.nrows() {
        let row: Vec<String> = (0..n).map(|j| format!("{}", gram.values[(i, j)])).collect();
        csv += &row.join(",");
        csv += "\n";
    }
    write_output(args.out.as_deref(), &csv)?;
    Ok(())
}

fn cmd_check_theta(args: CheckThetaArgs) -> Result<()> {
    let table = DataTable::from_csv_path(&args.data)?;
    let spec = parse_model_config(&std::fs::read_to_string(&args.config)?)?;
    let model: LoadedModel = load_model(&spec, &table)?;
    let desc = model.check_theta();
    println!("theta consists of {}:", model.layout.len());
    println!("{desc}");
    Ok(())
}

fn cmd_plot(args: PlotArgs) -> Result<()> {
    let artifact = FitArtifact::load(&args.artifact)?;
    let mut fit = artifact.rebuild()?;
    // The rebuilt fit is a fixed evaluation; splice the recorded trace back
    // in so the iteration plot reflects the original run.
    fit.trace = artifact.trace.clone();
    let kind: PlotKind = args.kind.parse()?;
    let data = posterior::plot_data(&fit, kind, args.seed)?;
    let mut csv = data.headers.join(",");
    csv += "\n";
    for row in &data.rows {
        csv += &row.join(",");
        csv += "\n";
    }
    write_output(args.out.as_deref(), &csv)?;
    Ok(())
}
