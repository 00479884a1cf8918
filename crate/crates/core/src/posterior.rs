//! Post-estimation quantities: intercept, fitted values, residuals,
//! out-of-sample prediction with credible intervals, accessors, and the
//! numbers behind the standard diagnostic plots.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::{DataColumn, DataTable};
use crate::error::{Error, Result};
use crate::estimation::{ConvergenceStatus, FitResult, SeOutcome};
use crate::kernels::{centre_values, raw_values, CategoricalColumn, CovariateColumn, KernelSpec};
use crate::linalg::SigmaFactor;
use crate::model::{build_h, combine_terms, LoadedModel, Role};
use crate::stats::std_normal_quantile;

/// Point predictions with optional credible bounds and RMSE against a
/// supplied truth.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub mean: DVector<f64>,
    pub lower: Option<DVector<f64>>,
    pub upper: Option<DVector<f64>>,
    pub alpha: Option<f64>,
    pub rmse: Option<f64>,
}

#[derive(Clone, Copy, Debug)]
pub struct PredictOptions {
    pub intervals: bool,
    /// Credibility level 1 - alpha.
    pub alpha: f64,
    /// Include the noise floor 1/psi in the predictive variance (intervals
    /// for the response rather than for f alone).
    pub include_noise: bool,
}

impl Default for PredictOptions {
    fn default() -> Self {
        PredictOptions { intervals: false, alpha: 0.05, include_noise: true }
    }
}

/// ML intercept: the training response mean.
pub fn intercept(fit: &FitResult) -> f64 {
    fit.model.y_mean
}

/// Fitted values y_hat = intercept + H w~ with the training RMSE.
///
/// Computed through the cross-kernel path (training columns against
/// themselves), which is the row of H_eta for each observation; `predict`
/// on the training inputs therefore reproduces these values bit for bit.
pub fn fitted_values(fit: &FitResult) -> Result<Prediction> {
    let model = &fit.model;
    let hx = cross_h(model, fit, &model.covariates)?;
    let mean = mean_from_cross(&hx, &fit.w_mean, model.y_mean);
    let rmse = rmse_against(&mean, model.y.as_slice());
    Ok(Prediction { mean, lower: None, upper: None, alpha: None, rmse: Some(rmse) })
}

/// y_hat[j] = intercept + <column j of the cross-Gram, w~>, the shared
/// arithmetic of fitted values and prediction.
fn mean_from_cross(hx: &DMatrix<f64>, w: &DVector<f64>, ybar: f64) -> DVector<f64> {
    DVector::from_fn(hx.ncols(), |j, _| hx.column(j).dot(w) + ybar)
}

/// Residuals y - y_hat.
pub fn residuals(fit: &FitResult) -> Result<DVector<f64>> {
    let fitted = fitted_values(fit)?;
    Ok(&fit.model.y - fitted.mean)
}

fn rmse_against(pred: &DVector<f64>, truth: &[f64]) -> f64 {
    let n = truth.len() as f64;
    (pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n).sqrt()
}

/// Resolve one covariate of a new data table against the training covariate
/// (same shape, same categorical levels, same functional grid).
fn resolve_new_column(model: &LoadedModel, k: usize, data: &DataTable) -> Result<CovariateColumn> {
    let cspec = &model.spec.covariates[k];
    let raw = match cspec.role {
        Role::Functional => DataColumn::Matrix(data.gather_prefix(&cspec.name)?),
        _ => data.require_column(&cspec.name)?.clone(),
    };
    let col = match (&model.covariates[k], raw) {
        (CovariateColumn::Categorical(_), DataColumn::Categorical(labels)) => {
            CovariateColumn::Categorical(CategoricalColumn::from_labels(&labels))
        }
        (CovariateColumn::Categorical(_), DataColumn::Numeric(v)) => {
            let labels: Vec<String> = v.iter().map(|&x| crate::data::numeric_label(x)).collect();
            CovariateColumn::Categorical(CategoricalColumn::from_labels(&labels))
        }
        (CovariateColumn::Continuous(train), DataColumn::Numeric(v)) => {
            if train.ncols() != 1 {
                return Err(Error::DimensionMismatch(format!(
                    "covariate `{}` was trained with {} columns",
                    cspec.name,
                    train.ncols()
                )));
            }
            CovariateColumn::Continuous(DMatrix::from_column_slice(v.len(), 1, &v))
        }
        (CovariateColumn::Continuous(train), DataColumn::Matrix(m)) => {
            if train.ncols() != m.ncols() {
                return Err(Error::DimensionMismatch(format!(
                    "covariate `{}` was trained with {} columns, new data has {}",
                    cspec.name,
                    train.ncols(),
                    m.ncols()
                )));
            }
            CovariateColumn::Continuous(m)
        }
        (CovariateColumn::Functional(train), DataColumn::Matrix(m)) => {
            if train.ncols() != m.ncols() {
                return Err(Error::DimensionMismatch(format!(
                    "functional covariate `{}` grid length {} does not match training {}",
                    cspec.name,
                    m.ncols(),
                    train.ncols()
                )));
            }
            CovariateColumn::Functional(m)
        }
        (_, other) => {
            return Err(Error::Data(format!(
                "covariate `{}`: new data column of incompatible type ({} rows)",
                cspec.name,
                other.len()
            )))
        }
    };
    col.validate()?;
    Ok(col)
}

/// Centred cross-Gram H_eta(train, new) (n_train x m_new), assembled with
/// the same term grouping as the training Gram so that predicting the
/// training inputs reproduces it bitwise.
fn cross_h(
    model: &LoadedModel,
    fit: &FitResult,
    new_cols: &[CovariateColumn],
) -> Result<DMatrix<f64>> {
    let param = &fit.param_hat;
    let grams = model.grams_at(param)?;
    let mut values = Vec::with_capacity(model.kernels.len());
    for (k, new_col) in new_cols.iter().enumerate() {
        let kern = model.kernel_at(k, param);
        let base_spec = if kern.is_poly() { KernelSpec::Linear } else { kern };
        let raw = raw_values(&base_spec, &model.covariates[k], Some(new_col))?;
        values.push(centre_values(&raw, &grams.stats[k]));
    }
    let pre: Vec<Option<DMatrix<f64>>> = model
        .spec
        .interactions
        .iter()
        .enumerate()
        .map(|(idx, &(a, b))| {
            grams.inter[idx].as_ref().map(|_| values[a].component_mul(&values[b]))
        })
        .collect();
    Ok(combine_terms(model, &values, &pre, param))
}

/// Posterior prediction at new covariate values.
pub fn predict(
    fit: &FitResult,
    newdata: &DataTable,
    intervals: bool,
    alpha: f64,
    y_test: Option<&[f64]>,
) -> Result<Prediction> {
    predict_with(fit, newdata, PredictOptions { intervals, alpha, include_noise: true }, y_test)
}

pub fn predict_with(
    fit: &FitResult,
    newdata: &DataTable,
    opts: PredictOptions,
    y_test: Option<&[f64]>,
) -> Result<Prediction> {
    if opts.intervals && !(opts.alpha > 0.0 && opts.alpha < 1.0) {
        return Err(Error::InvalidParam(format!(
            "credibility level alpha must lie in (0,1), got {}",
            opts.alpha
        )));
    }
    let model = &fit.model;
    let new_cols: Vec<CovariateColumn> = (0..model.kernels.len())
        .map(|k| resolve_new_column(model, k, newdata))
        .collect::<Result<_>>()?;
    let m_new = new_cols[0].nrows();
    if let Some(t) = y_test {
        if t.len() != m_new {
            return Err(Error::DimensionMismatch(format!(
                "y_test has {} entries for {m_new} prediction rows",
                t.len()
            )));
        }
    }
    let hx = cross_h(model, fit, &new_cols)?;
    let mean = mean_from_cross(&hx, &fit.w_mean, model.y_mean);

    let (lower, upper) = if opts.intervals {
        let psi = fit.param_hat.psi;
        let z = std_normal_quantile(1.0 - opts.alpha / 2.0);
        let mut lo = DVector::zeros(m_new);
        let mut hi = DVector::zeros(m_new);
        for j in 0..m_new {
            let col = hx.column(j).into_owned();
            let var_f = fit.factor.quad_inv(psi, &col).max(0.0);
            let var = if opts.include_noise { var_f + 1.0 / psi } else { var_f };
            let half = z * var.sqrt();
            lo[j] = mean[j] - half;
            hi[j] = mean[j] + half;
        }
        (Some(lo), Some(hi))
    } else {
        (None, None)
    };
    let rmse = y_test.map(|t| rmse_against(&mean, t));
    Ok(Prediction { mean, lower, upper, alpha: opts.intervals.then_some(opts.alpha), rmse })
}

// ---------------------------------------------------------------------------
// accessors (thin views over the fit)
// ---------------------------------------------------------------------------

/// All hyperparameters, fixed and estimated, on the natural scale.
pub fn get_hyp(fit: &FitResult) -> Vec<(String, f64)> {
    let model = &fit.model;
    let p = &fit.param_hat;
    let mut out = Vec::new();
    let multi = model.kernels.len() > 1;
    for k in 0..model.kernels.len() {
        let name = if multi { format!("lambda[{}]", k + 1) } else { "lambda".to_string() };
        out.push((name, p.lambda[k]));
        if let Some(v) = p.kernel_params[k] {
            let pname = match model.kernels[k] {
                KernelSpec::Fbm { .. } => "hurst",
                KernelSpec::Se { .. } => "lengthscale",
                KernelSpec::Poly { .. } => "offset",
                _ => "param",
            };
            out.push((format!("{pname}[{}]", k + 1), v));
        }
    }
    out.push(("psi".to_string(), p.psi));
    out
}

pub fn get_lambda(fit: &FitResult) -> Vec<f64> {
    fit.param_hat.lambda.clone()
}

pub fn get_psi(fit: &FitResult) -> f64 {
    fit.param_hat.psi
}

/// Standard errors for the estimated hyperparameters, if available.
pub fn get_se(fit: &FitResult) -> Option<Vec<(String, f64)>> {
    match fit.se.as_ref()? {
        SeOutcome::Available(entries) => {
            Some(entries.iter().map(|e| (e.name.clone(), e.se)).collect())
        }
        SeOutcome::Unavailable(_) => None,
    }
}

/// Kernel used per covariate, e.g. `[("age", "linear"), ("tree", "pearson")]`.
pub fn get_kernels(fit: &FitResult) -> Vec<(String, String)> {
    fit.model
        .spec
        .covariates
        .iter()
        .zip(&fit.model.kernels)
        .map(|(c, k)| (c.name.clone(), k.name()))
        .collect()
}

/// The model Gram H_eta at the estimated hyperparameters.
pub fn get_kern_matrix(fit: &FitResult) -> Result<DMatrix<f64>> {
    build_h(&fit.model, &fit.param_hat)
}

/// Training root mean squared error of prediction.
pub fn get_prederror(fit: &FitResult) -> Result<f64> {
    Ok(fitted_values(fit)?.rmse.expect("training rmse always present"))
}

pub fn get_method(fit: &FitResult) -> &'static str {
    fit.method.name()
}

pub fn get_convergence(fit: &FitResult) -> (ConvergenceStatus, &str) {
    (fit.status, &fit.message)
}

pub fn get_niter(fit: &FitResult) -> usize {
    fit.iterations
}

pub fn get_time(fit: &FitResult) -> std::time::Duration {
    fit.wall
}

/// Bytes held by the stored kernel matrices.
pub fn get_size(fit: &FitResult) -> usize {
    fit.model.gram_bytes()
}

/// Which hyperparameters were estimated (true) or fixed (false).
pub fn get_estl(fit: &FitResult) -> Vec<(String, bool)> {
    let estimated: std::collections::HashSet<String> =
        fit.model.layout.names().into_iter().collect();
    get_hyp(fit).into_iter().map(|(name, _)| {
        let est = estimated.contains(&name);
        (name, est)
    }).collect()
}

pub fn get_intercept(fit: &FitResult) -> f64 {
    intercept(fit)
}

// ---------------------------------------------------------------------------
// plot data
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlotKind {
    Fitted,
    Resid,
    Iter,
    Ppc,
}

impl std::str::FromStr for PlotKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<PlotKind> {
        match s.to_ascii_lowercase().as_str() {
            "fitted" => Ok(PlotKind::Fitted),
            "resid" => Ok(PlotKind::Resid),
            "iter" => Ok(PlotKind::Iter),
            "ppc" => Ok(PlotKind::Ppc),
            other => Err(Error::InvalidParam(format!(
                "unknown plot kind `{other}` (expected fitted, resid, iter or ppc)"
            ))),
        }
    }
}

/// A plain tabular dataset: the numbers behind one diagnostic plot.
#[derive(Clone, Debug)]
pub struct PlotData {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

const FITTED_GRID: usize = 200;
const PPC_DRAWS: usize = 50;

/// Emit the data behind a diagnostic plot. `seed` drives the posterior
/// predictive draws of the `ppc` kind.
pub fn plot_data(fit: &FitResult, kind: PlotKind, seed: u64) -> Result<PlotData> {
    match kind {
        PlotKind::Iter => {
            let headers = vec!["iteration".into(), "loglik".into()];
            let rows = fit
                .trace
                .iter()
                .enumerate()
                .map(|(i, ll)| vec![i.to_string(), format!("{ll}")])
                .collect();
            Ok(PlotData { headers, rows })
        }
        PlotKind::Resid => {
            let fitted = fitted_values(fit)?;
            let resid = &fit.model.y - &fitted.mean;
            let headers = vec!["fitted".into(), "residual".into()];
            let rows = fitted
                .mean
                .iter()
                .zip(resid.iter())
                .map(|(f, r)| vec![format!("{f}"), format!("{r}")])
                .collect();
            Ok(PlotData { headers, rows })
        }
        PlotKind::Fitted => fitted_line_data(fit),
        PlotKind::Ppc => ppc_data(fit, seed),
    }
}

/// 200 evenly spaced grid points across the continuous covariate's range,
/// one curve per categorical level when a Pearson covariate is present.
fn fitted_line_data(fit: &FitResult) -> Result<PlotData> {
    let model = &fit.model;
    let mut cont: Option<usize> = None;
    let mut cat: Option<usize> = None;
    for (k, col) in model.covariates.iter().enumerate() {
        match col {
            CovariateColumn::Continuous(m) if m.ncols() == 1 => {
                if cont.replace(k).is_some() {
                    return Err(Error::Spec(
                        "fitted-line data needs a single continuous covariate".into(),
                    ));
                }
            }
            CovariateColumn::Categorical(_) => cat = Some(k),
            _ => {
                return Err(Error::Spec(
                    "fitted-line data needs one 1-D continuous covariate".into(),
                ))
            }
        }
    }
    let kx = cont
        .ok_or_else(|| Error::Spec("fitted-line data needs one 1-D continuous covariate".into()))?;
    let xcol = match &model.covariates[kx] {
        CovariateColumn::Continuous(m) => m,
        _ => unreachable!(),
    };
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in xcol.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let levels: Vec<String> = match cat.map(|k| &model.covariates[k]) {
        Some(CovariateColumn::Categorical(c)) => c.levels.clone(),
        _ => vec![],
    };
    let grid: Vec<f64> =
        (0..FITTED_GRID).map(|i| lo + (hi - lo) * i as f64 / (FITTED_GRID - 1) as f64).collect();

    let mut headers = vec!["x".to_string()];
    if cat.is_some() {
        headers.push("level".to_string());
    }
    headers.extend(["yhat".to_string(), "lower".to_string(), "upper".to_string()]);

    let mut rows = Vec::new();
    let level_iter: Vec<Option<&String>> =
        if levels.is_empty() { vec![None] } else { levels.iter().map(Some).collect() };
    for level in level_iter {
        let mut table = DataTable::new();
        table.push_column(
            model.spec.covariates[kx].name.clone(),
            DataColumn::Numeric(grid.clone()),
        )?;
        if let (Some(kc), Some(lv)) = (cat, level) {
            table.push_column(
                model.spec.covariates[kc].name.clone(),
                DataColumn::Categorical(vec![lv.clone(); grid.len()]),
            )?;
        }
        let pred = predict(fit, &table, true, 0.05, None)?;
        let lo_b = pred.lower.as_ref().expect("intervals requested");
        let hi_b = pred.upper.as_ref().expect("intervals requested");
        for (i, &x) in grid.iter().enumerate() {
            let mut row = vec![format!("{x}")];
            if let Some(lv) = level {
                row.push(lv.clone());
            }
            row.extend([
                format!("{}", pred.mean[i]),
                format!("{}", lo_b[i]),
                format!("{}", hi_b[i]),
            ]);
            rows.push(row);
        }
    }
    Ok(PlotData { headers, rows })
}

/// Posterior predictive draws: replicated response vectors sampled at the
/// estimated hyperparameters alongside the observed responses.
fn ppc_data(fit: &FitResult, seed: u64) -> Result<PlotData> {
    let model = &fit.model;
    let n = model.n;
    let psi = fit.param_hat.psi;
    let fitted = fitted_values(fit)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // f | y has covariance H Sigma^-1 H = B diag(u^2/d) B'; sample through
    // the spectral factor.
    let (basis, values) = match &fit.factor {
        SigmaFactor::Dense(e) => (&e.vectors, &e.values),
        SigmaFactor::LowRank { vectors, values, .. } => (vectors, values),
    };
    let r = values.len();
    let noise_sd = (1.0 / psi).sqrt();
    let mut headers = vec!["obs".to_string()];
    let mut draws: Vec<DVector<f64>> = Vec::with_capacity(PPC_DRAWS);
    for d in 0..PPC_DRAWS {
        headers.push(format!("rep_{}", d + 1));
        let mut z = DVector::zeros(r);
        for i in 0..r {
            let u = values[i];
            let dd = psi * u * u + 1.0 / psi;
            let sd = (u * u / dd).sqrt();
            z[i] = rng.sample::<f64, _>(StandardNormal) * sd;
        }
        let mut rep = &fitted.mean + basis * z;
        for i in 0..n {
            rep[i] += rng.sample::<f64, _>(StandardNormal) * noise_sd;
        }
        draws.push(rep);
    }
    let rows = (0..n)
        .map(|i| {
            let mut row = vec![format!("{}", model.y[i])];
            row.extend(draws.iter().map(|d| format!("{}", d[i])));
            row
        })
        .collect();
    Ok(PlotData { headers, rows })
}
