//! Maximum-likelihood estimation of the model hyperparameters: direct
//! L-BFGS on the deviance, EM, mixed (EM warm-start then direct), fixed
//! evaluation, parallel restarts, and delta-method standard errors.

mod em;
mod evaluator;

use std::sync::Arc;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{sym_eigen, SigmaFactor};
use crate::model::{param_to_theta, theta_to_param, LoadedModel, ParamVector};
use crate::optimize::{self, LbfgsOptions, StopReason};
use crate::stats::two_sided_p;

pub(crate) use evaluator::Evaluator;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Direct,
    Em,
    Mixed,
    Fixed,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Direct => "direct",
            Method::Em => "em",
            Method::Mixed => "mixed",
            Method::Fixed => "fixed",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Method> {
        match s.to_ascii_lowercase().as_str() {
            "direct" => Ok(Method::Direct),
            "em" => Ok(Method::Em),
            "mixed" => Ok(Method::Mixed),
            "fixed" => Ok(Method::Fixed),
            other => Err(Error::InvalidParam(format!(
                "unknown method `{other}` (expected direct, em, mixed or fixed)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvergenceStatus {
    Converged,
    MaxitReached,
    Aborted,
}

impl ConvergenceStatus {
    pub fn label(&self) -> &'static str {
        match self {
            ConvergenceStatus::Converged => "converged",
            ConvergenceStatus::MaxitReached => "maxit reached",
            ConvergenceStatus::Aborted => "aborted",
        }
    }
}

/// Estimation control options.
#[derive(Clone, Debug)]
pub struct ControlOptions {
    /// Maximum iterations for L-BFGS or EM.
    pub maxit: usize,
    /// Initial EM iterations for the mixed method.
    pub em_maxit: usize,
    /// Stop when the objective improves by less than this.
    pub stop_crit: f64,
    /// Explicit start, in theta (transformed) space.
    pub theta0: Option<DVector<f64>>,
    /// Number of random restarts (0 = none).
    pub restarts: usize,
    /// Worker threads for restarts.
    pub no_cores: usize,
    /// Iteration budget for each restart run before the best is continued.
    pub par_maxit: usize,
    pub silent: bool,
    pub seed: u64,
}

impl Default for ControlOptions {
    fn default() -> Self {
        ControlOptions {
            maxit: 100,
            em_maxit: 5,
            stop_crit: 1e-8,
            theta0: None,
            restarts: 0,
            no_cores: std::thread::available_parallelism().map_or(1, |c| c.get()),
            par_maxit: 5,
            silent: false,
            seed: 0,
        }
    }
}

impl ControlOptions {
    fn validate(&self) -> Result<()> {
        if self.maxit < 1 {
            return Err(Error::InvalidParam("maxit must be at least 1".into()));
        }
        if !(self.stop_crit > 0.0) {
            return Err(Error::InvalidParam("stop_crit must be positive".into()));
        }
        if self.par_maxit > self.maxit {
            return Err(Error::InvalidParam("par_maxit must not exceed maxit".into()));
        }
        Ok(())
    }
}

/// Standard error, z statistic and two-sided p-value for one estimated
/// hyperparameter, on the natural scale.
#[derive(Clone, Debug)]
pub struct SeEntry {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
    pub z: f64,
    pub p_value: f64,
}

#[derive(Clone, Debug)]
pub enum SeOutcome {
    Available(Vec<SeEntry>),
    /// Hessian not positive definite (boundary or saddle); nothing is
    /// fabricated.
    Unavailable(String),
}

/// A fitted I-prior model.
#[derive(Clone, Debug)]
pub struct FitResult {
    pub model: Arc<LoadedModel>,
    pub method: Method,
    pub theta_hat: DVector<f64>,
    pub param_hat: ParamVector,
    pub log_lik: f64,
    /// Log-likelihood after each iteration (concatenated across phases for
    /// the mixed method).
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub status: ConvergenceStatus,
    pub message: String,
    pub wall: Duration,
    pub se: Option<SeOutcome>,
    /// Posterior mean of the I-prior random effects.
    pub w_mean: DVector<f64>,
    /// Spectral factor of Sigma at theta_hat; the posterior covariance of w
    /// is Sigma^-1.
    pub factor: SigmaFactor,
}

impl FitResult {
    pub fn deviance(&self) -> f64 {
        -2.0 * self.log_lik
    }

    /// Estimated error standard deviation, 1/sqrt(psi).
    pub fn error_sd(&self) -> f64 {
        1.0 / self.param_hat.psi.sqrt()
    }

    /// Estimated hyperparameters on the natural scale, slot by slot.
    pub fn coef(&self) -> Vec<(String, f64)> {
        let names = self.model.layout.names();
        names
            .into_iter()
            .zip(self.model.layout.slots.iter())
            .map(|(name, slot)| {
                let v = match slot.kind {
                    crate::model::SlotKind::Lambda(k) => self.param_hat.lambda[k],
                    crate::model::SlotKind::KernelParam(k) => {
                        self.param_hat.kernel_params[k].unwrap_or(f64::NAN)
                    }
                    crate::model::SlotKind::Psi => self.param_hat.psi,
                };
                (name, v)
            })
            .collect()
    }
}

/// Marginal log-likelihood at theta.
pub fn log_likelihood(model: &LoadedModel, theta: &DVector<f64>) -> Result<f64> {
    Evaluator::new(model)?.loglik(theta)
}

/// Deviance, -2 log L.
pub fn deviance(model: &LoadedModel, theta: &DVector<f64>) -> Result<f64> {
    Ok(-2.0 * log_likelihood(model, theta)?)
}

/// Gradient of the marginal log-likelihood in theta space.
pub fn log_likelihood_gradient(model: &LoadedModel, theta: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(Evaluator::new(model)?.loglik_grad(theta)?.1)
}

fn require_estimable(model: &LoadedModel) -> Result<()> {
    if model.layout.is_empty() {
        return Err(Error::NothingToEstimate);
    }
    Ok(())
}

/// Starting theta: the explicit control value, or standard-normal draws
/// (resampled up to 10 times if the objective is non-finite there).
fn starting_theta(
    model: &LoadedModel,
    evaluator: &Evaluator<'_>,
    control: &ControlOptions,
) -> Result<DVector<f64>> {
    let k = model.layout.len();
    if let Some(t0) = &control.theta0 {
        if t0.len() != k {
            return Err(Error::DimensionMismatch(format!(
                "theta0 has {} entries, layout has {k} slots",
                t0.len()
            )));
        }
        if t0.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParam("theta0 has non-finite entries".into()));
        }
        return Ok(t0.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(control.seed);
    for _ in 0..10 {
        let cand = DVector::from_fn(k, |_, _| rng.sample::<f64, _>(StandardNormal));
        if let Ok(ll) = evaluator.loglik(&cand) {
            if ll.is_finite() {
                return Ok(cand);
            }
        }
    }
    Err(Error::Numerical(
        "could not find a finite starting point after 10 random draws".into(),
    ))
}

struct DevianceObjective<'a, 'm> {
    evaluator: &'a Evaluator<'m>,
}

impl optimize::Objective for DevianceObjective<'_, '_> {
    fn value(&mut self, x: &DVector<f64>) -> Option<f64> {
        match self.evaluator.loglik(x) {
            Ok(ll) if ll.is_finite() => Some(-2.0 * ll),
            _ => None,
        }
    }

    fn value_grad(&mut self, x: &DVector<f64>) -> Option<(f64, DVector<f64>)> {
        match self.evaluator.loglik_grad(x) {
            Ok((ll, g)) if ll.is_finite() && g.iter().all(|v| v.is_finite()) => {
                Some((-2.0 * ll, g * -2.0))
            }
            _ => None,
        }
    }
}

fn finalize(
    model: &Arc<LoadedModel>,
    method: Method,
    theta: DVector<f64>,
    trace: Vec<f64>,
    iterations: usize,
    status: ConvergenceStatus,
    message: String,
    started: Instant,
    with_se: bool,
) -> Result<FitResult> {
    let evaluator = Evaluator::new(model)?;
    let state = evaluator.state_at(&theta)?;
    let param = state.param.clone();
    let w_mean = state.factor.posterior_w_mean(param.psi, &model.y_centred);
    let se = if with_se && !model.layout.is_empty() {
        Some(standard_errors(model, &theta)?)
    } else {
        None
    };
    Ok(FitResult {
        model: Arc::clone(model),
        method,
        theta_hat: theta,
        param_hat: param,
        log_lik: state.loglik,
        trace,
        iterations,
        status,
        message,
        wall: started.elapsed(),
        se,
        w_mean,
        factor: state.factor.clone(),
    })
}

/// Direct minimisation of the deviance by L-BFGS from a (seeded) random
/// start in theta space.
pub fn fit_direct(model: &Arc<LoadedModel>, control: &ControlOptions) -> Result<FitResult> {
    control.validate()?;
    require_estimable(model)?;
    let started = Instant::now();
    let evaluator = Evaluator::new(model)?;
    let theta0 = starting_theta(model, &evaluator, control)?;
    let mut obj = DevianceObjective { evaluator: &evaluator };
    let opts = LbfgsOptions {
        maxit: control.maxit,
        f_tol: control.stop_crit,
        grad_tol: 0.0,
        memory: 10,
    };
    let silent = control.silent;
    let out = optimize::minimize(&mut obj, theta0, &opts, |it, f| {
        if !silent && it % 20 == 0 {
            eprintln!("iter {it} log-likelihood {:.6}", -0.5 * f);
        }
    });
    let (status, message) = match out.stop {
        StopReason::FtolReached | StopReason::GradTolReached => {
            (ConvergenceStatus::Converged, "converged".to_string())
        }
        StopReason::LineSearchStalled => (
            ConvergenceStatus::Converged,
            "converged (line search found no further improvement)".to_string(),
        ),
        StopReason::MaxIterations => (
            ConvergenceStatus::MaxitReached,
            format!("reached the maximum of {} iterations", control.maxit),
        ),
        StopReason::NonFiniteStart => {
            return Err(Error::Numerical("objective non-finite at the starting point".into()))
        }
    };
    if !silent {
        eprintln!("final log-likelihood {:.6} ({message})", -0.5 * out.f);
    }
    let trace: Vec<f64> = out.trace.iter().map(|f| -0.5 * f).collect();
    finalize(model, Method::Direct, out.x, trace, out.iterations, status, message, started, true)
}

/// EM estimation with closed-form conditional updates (numeric Q
/// maximisation for kernel parameters and polynomial scales).
pub fn fit_em(model: &Arc<LoadedModel>, control: &ControlOptions) -> Result<FitResult> {
    control.validate()?;
    require_estimable(model)?;
    let started = Instant::now();
    let evaluator = Evaluator::new(model)?;
    let theta0 = starting_theta(model, &evaluator, control)?;
    let out = em::run_em(model, &evaluator, theta0, control.maxit, control)?;
    if !control.silent {
        eprintln!("{}", out.message);
    }
    let status = out.status;
    let message = out.message;
    finalize(model, Method::Em, out.theta, out.trace, out.iterations, status, message, started, true)
}

/// Mixed method: `em_maxit` EM iterations, then direct optimisation from
/// the resulting theta; the traces are concatenated.
pub fn fit_mixed(model: &Arc<LoadedModel>, control: &ControlOptions) -> Result<FitResult> {
    control.validate()?;
    require_estimable(model)?;
    let started = Instant::now();
    let evaluator = Evaluator::new(model)?;
    let theta0 = starting_theta(model, &evaluator, control)?;
    let (theta_after_em, mut trace, em_iters) = if control.em_maxit > 0 {
        if !control.silent {
            eprintln!("Running {} initial EM iterations", control.em_maxit);
        }
        let out = em::run_em(model, &evaluator, theta0, control.em_maxit, control)?;
        (out.theta, out.trace, out.iterations)
    } else {
        (theta0, Vec::new(), 0)
    };
    if control.em_maxit >= control.maxit {
        // Degenerate request: the EM phase already used the whole budget.
        let status = if trace.len() >= 2
            && trace[trace.len() - 1] - trace[trace.len() - 2] < control.stop_crit
        {
            ConvergenceStatus::Converged
        } else {
            ConvergenceStatus::MaxitReached
        };
        let message = format!("EM phase used the full budget of {} iterations", control.maxit);
        return finalize(
            model,
            Method::Mixed,
            theta_after_em,
            trace,
            em_iters,
            status,
            message,
            started,
            true,
        );
    }
    if !control.silent {
        eprintln!("Now switching to direct optimisation");
    }
    let direct_control = ControlOptions {
        theta0: Some(theta_after_em),
        restarts: 0,
        ..control.clone()
    };
    let direct = fit_direct(model, &direct_control)?;
    if trace.is_empty() {
        trace = direct.trace.clone();
    } else {
        trace.extend_from_slice(&direct.trace[1..]);
    }
    let message = format!("mixed: {} EM + {} direct iterations; {}", em_iters, direct.iterations, direct.message);
    let status = direct.status;
    let iterations = em_iters + direct.iterations;
    finalize(model, Method::Mixed, direct.theta_hat, trace, iterations, status, message, started, true)
}

/// Posterior quantities at fixed hyperparameters; no optimisation, no
/// standard errors.
pub fn fit_fixed(model: &Arc<LoadedModel>, theta: &DVector<f64>) -> Result<FitResult> {
    let started = Instant::now();
    let evaluator = Evaluator::new(model)?;
    let state = evaluator.state_at(theta)?;
    let ll = state.loglik;
    finalize(
        model,
        Method::Fixed,
        theta.clone(),
        vec![ll],
        0,
        ConvergenceStatus::Converged,
        "fixed hyperparameters (no optimisation)".to_string(),
        started,
        false,
    )
}

/// Multiple short runs from independent random starts, executed across a
/// bounded worker pool; the best run (highest log-likelihood, ties broken
/// by lowest run index) is continued with the full iteration budget.
pub fn fit_restarts(
    model: &Arc<LoadedModel>,
    method: Method,
    control: &ControlOptions,
) -> Result<FitResult> {
    control.validate()?;
    require_estimable(model)?;
    if method == Method::Fixed {
        return Err(Error::InvalidParam("restarts do not apply to the fixed method".into()));
    }
    let started = Instant::now();
    let runs = control.restarts.max(1);
    let workers = control.no_cores.max(1).min(runs);
    if !control.silent {
        eprintln!("Performing {runs} random restarts on {workers} cores");
    }
    let run_seed = |r: usize| -> u64 {
        control.seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(r as u64 + 1))
    };

    let mut results: Vec<Option<Result<FitResult>>> = Vec::new();
    results.resize_with(runs, || None);
    std::thread::scope(|scope| {
        let mut slices: Vec<&mut [Option<Result<FitResult>>]> = Vec::new();
        let mut rest = results.as_mut_slice();
        let per = runs.div_ceil(workers);
        while !rest.is_empty() {
            let take = per.min(rest.len());
            let (head, tail) = rest.split_at_mut(take);
            slices.push(head);
            rest = tail;
        }
        for (w, slice) in slices.into_iter().enumerate() {
            let model = Arc::clone(model);
            let control = control.clone();
            scope.spawn(move || {
                for (i, slot) in slice.iter_mut().enumerate() {
                    let run = w * per + i;
                    let run_control = ControlOptions {
                        maxit: control.par_maxit.max(1),
                        theta0: None,
                        restarts: 0,
                        silent: true,
                        seed: run_seed(run),
                        ..control.clone()
                    };
                    let res = match method {
                        Method::Direct => fit_direct(&model, &run_control),
                        Method::Em => fit_em(&model, &run_control),
                        Method::Mixed => fit_mixed(&model, &run_control),
                        Method::Fixed => unreachable!(),
                    };
                    *slot = Some(res);
                }
            });
        }
    });

    let mut best: Option<(usize, FitResult)> = None;
    for (r, res) in results.into_iter().enumerate() {
        let fit = match res.expect("all runs executed") {
            Ok(f) => f,
            Err(_) => continue,
        };
        if !control.silent {
            eprintln!("Run {}: log-likelihood {:.4}", r + 1, fit.log_lik);
        }
        let better = match &best {
            None => fit.log_lik.is_finite(),
            Some((_, b)) => fit.log_lik.is_finite() && fit.log_lik > b.log_lik,
        };
        if better {
            best = Some((r, fit));
        }
    }
    let (best_idx, best_fit) = best
        .ok_or_else(|| Error::Numerical("all restart runs failed with non-finite likelihood".into()))?;
    if !control.silent {
        eprintln!("Continuing on run {}", best_idx + 1);
    }
    let cont_control = ControlOptions {
        theta0: Some(best_fit.theta_hat.clone()),
        restarts: 0,
        ..control.clone()
    };
    let cont = match method {
        Method::Direct => fit_direct(model, &cont_control)?,
        Method::Em => fit_em(model, &cont_control)?,
        Method::Mixed => fit_mixed(model, &cont_control)?,
        Method::Fixed => unreachable!(),
    };
    let mut trace = best_fit.trace.clone();
    if !cont.trace.is_empty() {
        let skip = if trace.is_empty() { 0 } else { 1 };
        trace.extend_from_slice(&cont.trace[skip.min(cont.trace.len())..]);
    }
    let message = format!(
        "best of {} restarts (run {}), then {}",
        runs,
        best_idx + 1,
        cont.message
    );
    let iterations = best_fit.iterations + cont.iterations;
    let status = cont.status;
    finalize(model, method, cont.theta_hat, trace, iterations, status, message, started, true)
}

/// Fit dispatch: restarts wrap any iterative method when requested.
pub fn fit(model: &Arc<LoadedModel>, method: Method, control: &ControlOptions) -> Result<FitResult> {
    if control.restarts > 0 && method != Method::Fixed {
        return fit_restarts(model, method, control);
    }
    match method {
        Method::Direct => fit_direct(model, control),
        Method::Em => fit_em(model, control),
        Method::Mixed => fit_mixed(model, control),
        Method::Fixed => {
            let theta = match &control.theta0 {
                Some(t) => t.clone(),
                None => param_to_theta(&model.layout, &model.layout.base)?,
            };
            fit_fixed(model, &theta)
        }
    }
}

/// Standard errors at theta_hat: numerical Hessian of the negative
/// log-likelihood (central differences of the gradient, step
/// 1e-4 max(1, |theta_j|)), inverted when positive definite, then mapped to
/// the natural scale by the delta method SE_param = SE_theta |g'(theta)|.
pub fn standard_errors(model: &LoadedModel, theta_hat: &DVector<f64>) -> Result<SeOutcome> {
    let k = model.layout.len();
    if k == 0 {
        return Ok(SeOutcome::Unavailable("no estimated hyperparameters".into()));
    }
    let evaluator = Evaluator::new(model)?;
    let neg_grad = |theta: &DVector<f64>| -> Result<DVector<f64>> {
        Ok(evaluator.loglik_grad(theta)?.1 * -1.0)
    };
    let mut hess = DMatrix::zeros(k, k);
    for j in 0..k {
        let h = 1e-4 * theta_hat[j].abs().max(1.0);
        let mut tp = theta_hat.clone();
        tp[j] += h;
        let mut tm = theta_hat.clone();
        tm[j] -= h;
        let gp = neg_grad(&tp)?;
        let gm = neg_grad(&tm)?;
        let col = (gp - gm) / (2.0 * h);
        hess.set_column(j, &col);
    }
    hess = (&hess + hess.transpose()) * 0.5;
    let eig = sym_eigen(&hess)?;
    if eig.values.iter().any(|&e| e <= 0.0) {
        return Ok(SeOutcome::Unavailable(format!(
            "observed information is not positive definite (smallest eigenvalue {:.3e}); the optimum may sit on a boundary or saddle",
            eig.values[0]
        )));
    }
    // Invert through the eigendecomposition.
    let mut scaled = eig.vectors.clone();
    for j in 0..k {
        let w = 1.0 / eig.values[j];
        for i in 0..k {
            scaled[(i, j)] *= w;
        }
    }
    let cov = scaled * eig.vectors.transpose();
    let param = theta_to_param(&model.layout, theta_hat)?;
    let names = model.layout.names();
    let mut entries = Vec::with_capacity(k);
    for (j, name) in names.into_iter().enumerate() {
        let slot = model.layout.slots[j];
        let se_theta = cov[(j, j)].sqrt();
        let deriv = slot.transform.dnatural_dtheta(theta_hat[j]).abs();
        let se = se_theta * deriv;
        let estimate = match slot.kind {
            crate::model::SlotKind::Lambda(kk) => param.lambda[kk],
            crate::model::SlotKind::KernelParam(kk) => param.kernel_params[kk].unwrap_or(f64::NAN),
            crate::model::SlotKind::Psi => param.psi,
        };
        let z = if se > 0.0 { estimate / se } else { f64::NAN };
        entries.push(SeEntry { name, estimate, se, z, p_value: two_sided_p(z) });
    }
    Ok(SeOutcome::Available(entries))
}
