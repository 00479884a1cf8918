//! Reproducing-kernel evaluation: Gram and cross-Gram matrices for the five
//! supported kernels (linear, fBm, squared exponential, polynomial, Pearson),
//! kernel centring, and the Sobolev-Hilbert inner product backing functional
//! covariates.
//!
//! Scale parameters are deliberately not applied here (except for the
//! polynomial kernel, where the scale sits inside the power); model assembly
//! multiplies Grams by their scales so a Gram can be reused across scale
//! updates during estimation.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A single covariate column, in one of the three supported shapes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum CovariateColumn {
    /// n rows of d real features.
    Continuous(DMatrix<f64>),
    /// n labels drawn from a finite level set.
    Categorical(CategoricalColumn),
    /// n discretised curves, each a length-T vector on a regular grid.
    Functional(DMatrix<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoricalColumn {
    /// Distinct levels in sorted order.
    pub levels: Vec<String>,
    /// Per-observation index into `levels`.
    pub codes: Vec<usize>,
    /// Observation count per level (empirical frequencies).
    pub counts: Vec<usize>,
}

impl CategoricalColumn {
    pub fn from_labels<S: AsRef<str>, I: IntoIterator<Item = S>>(labels: I) -> Self {
        let raw: Vec<String> = labels.into_iter().map(|s| s.as_ref().to_owned()).collect();
        let mut levels: Vec<String> = raw.clone();
        levels.sort();
        levels.dedup();
        let codes: Vec<usize> = raw
            .iter()
            .map(|v| levels.binary_search(v).expect("level present"))
            .collect();
        let mut counts = vec![0usize; levels.len()];
        for &c in &codes {
            counts[c] += 1;
        }
        CategoricalColumn { levels, codes, counts }
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn label(&self, i: usize) -> &str {
        &self.levels[self.codes[i]]
    }

    /// Map another categorical column onto this column's level set.
    /// Labels unseen in the training levels are a hard error.
    pub fn codes_against(&self, other: &CategoricalColumn) -> Result<Vec<usize>> {
        other
            .codes
            .iter()
            .map(|&c| {
                let lab = &other.levels[c];
                self.levels
                    .binary_search(lab)
                    .map_err(|_| Error::UnseenLevel(lab.clone()))
            })
            .collect()
    }
}

impl CovariateColumn {
    pub fn nrows(&self) -> usize {
        match self {
            CovariateColumn::Continuous(m) => m.nrows(),
            CovariateColumn::Categorical(c) => c.len(),
            CovariateColumn::Functional(m) => m.nrows(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            CovariateColumn::Continuous(m) => {
                if m.ncols() < 1 {
                    return Err(Error::DimensionMismatch("continuous column needs d >= 1".into()));
                }
                if m.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Data("continuous column has non-finite entries".into()));
                }
            }
            CovariateColumn::Categorical(c) => {
                if c.counts.iter().sum::<usize>() != c.codes.len() {
                    return Err(Error::Data("categorical frequencies do not sum to n".into()));
                }
                if c.counts.iter().any(|&k| k == 0) {
                    return Err(Error::Data("categorical level with zero frequency".into()));
                }
            }
            CovariateColumn::Functional(m) => {
                if m.ncols() < 2 {
                    return Err(Error::DimensionMismatch(
                        "functional column needs grid length T >= 2".into(),
                    ));
                }
                if m.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Data("functional column has non-finite entries".into()));
                }
            }
        }
        Ok(())
    }
}

/// One covariate's kernel: kind plus kernel hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum KernelSpec {
    Linear,
    Fbm { gamma: f64 },
    Se { lengthscale: f64 },
    Poly { degree: u32, offset: f64 },
    Pearson,
}

impl KernelSpec {
    pub const DEFAULT_HURST: f64 = 0.5;
    pub const DEFAULT_LENGTHSCALE: f64 = 1.0;
    pub const DEFAULT_DEGREE: u32 = 2;
    pub const DEFAULT_OFFSET: f64 = 0.0;

    pub fn validate(&self) -> Result<()> {
        match *self {
            KernelSpec::Fbm { gamma } => {
                if !(gamma > 0.0 && gamma < 1.0) {
                    return Err(Error::InvalidParam(format!(
                        "fbm Hurst coefficient must lie in (0,1), got {gamma}"
                    )));
                }
            }
            KernelSpec::Se { lengthscale } => {
                if !(lengthscale > 0.0) {
                    return Err(Error::InvalidParam(format!(
                        "se lengthscale must be positive, got {lengthscale}"
                    )));
                }
            }
            KernelSpec::Poly { degree, offset } => {
                if degree < 1 {
                    return Err(Error::InvalidParam("poly degree must be >= 1".into()));
                }
                if offset < 0.0 {
                    return Err(Error::InvalidParam(format!(
                        "poly offset must be >= 0, got {offset}"
                    )));
                }
            }
            KernelSpec::Linear | KernelSpec::Pearson => {}
        }
        Ok(())
    }

    /// The tunable kernel parameter (Hurst, lengthscale or offset), if any.
    pub fn tunable_param(&self) -> Option<f64> {
        match *self {
            KernelSpec::Fbm { gamma } => Some(gamma),
            KernelSpec::Se { lengthscale } => Some(lengthscale),
            KernelSpec::Poly { offset, .. } => Some(offset),
            KernelSpec::Linear | KernelSpec::Pearson => None,
        }
    }

    /// Same kind with the tunable parameter replaced.
    pub fn with_tunable_param(&self, value: f64) -> KernelSpec {
        match *self {
            KernelSpec::Fbm { .. } => KernelSpec::Fbm { gamma: value },
            KernelSpec::Se { .. } => KernelSpec::Se { lengthscale: value },
            KernelSpec::Poly { degree, .. } => KernelSpec::Poly { degree, offset: value },
            ref other => other.clone(),
        }
    }

    pub fn name(&self) -> String {
        match *self {
            KernelSpec::Linear => "linear".into(),
            KernelSpec::Fbm { gamma } => format!("fbm,{gamma}"),
            KernelSpec::Se { lengthscale } => format!("se,{lengthscale}"),
            KernelSpec::Poly { degree, offset } => format!("poly{degree},{offset}"),
            KernelSpec::Pearson => "pearson".into(),
        }
    }

    /// Capitalised family name for summaries, e.g. `Linear`, `fBm-0.5`.
    pub fn display_name(&self) -> String {
        match *self {
            KernelSpec::Linear => "Linear".into(),
            KernelSpec::Fbm { gamma } => format!("fBm-{gamma}"),
            KernelSpec::Se { lengthscale } => format!("SE-{lengthscale}"),
            KernelSpec::Poly { degree, .. } => format!("Poly-{degree}"),
            KernelSpec::Pearson => "Pearson".into(),
        }
    }

    pub fn is_poly(&self) -> bool {
        matches!(self, KernelSpec::Poly { .. })
    }

    pub fn is_pearson(&self) -> bool {
        matches!(self, KernelSpec::Pearson)
    }
}

/// Column means and grand mean of an uncentred training self-Gram;
/// everything needed to centre cross-Grams of new points later.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CentringStats {
    pub col_means: Vec<f64>,
    pub grand_mean: f64,
}

/// A kernel matrix, possibly centred; rows index `x`, columns index `y`.
#[derive(Clone, Debug, PartialEq)]
pub struct GramMatrix {
    pub values: DMatrix<f64>,
    pub centred: bool,
    pub stats: Option<CentringStats>,
}

// ---------------------------------------------------------------------------
// pairwise evaluation plumbing
// ---------------------------------------------------------------------------

/// Feature rows backing the inner product: continuous columns as-is,
/// functional columns as first differences (the Sobolev-Hilbert inner
/// product on a regular grid is the dot product of first differences).
fn feature_matrix(col: &CovariateColumn) -> Result<DMatrix<f64>> {
    col.validate()?;
    match col {
        CovariateColumn::Continuous(m) => Ok(m.clone()),
        CovariateColumn::Functional(m) => {
            let (n, t) = (m.nrows(), m.ncols());
            Ok(DMatrix::from_fn(n, t - 1, |i, j| m[(i, j + 1)] - m[(i, j)]))
        }
        CovariateColumn::Categorical(_) => {
            Err(Error::KernelInput("categorical input to an inner-product kernel".into()))
        }
    }
}

fn feature_pair(
    x: &CovariateColumn,
    y: Option<&CovariateColumn>,
) -> Result<(DMatrix<f64>, Option<DMatrix<f64>>)> {
    let fx = feature_matrix(x)?;
    let fy = match y {
        None => None,
        Some(col) => {
            let f = feature_matrix(col)?;
            if f.ncols() != fx.ncols() {
                return Err(Error::DimensionMismatch(format!(
                    "covariate dimension mismatch: {} vs {}",
                    fx.ncols(),
                    f.ncols()
                )));
            }
            Some(f)
        }
    };
    Ok((fx, fy))
}

fn row_dot(a: &DMatrix<f64>, i: usize, b: &DMatrix<f64>, j: usize) -> f64 {
    let mut s = 0.0;
    for t in 0..a.ncols() {
        s += a[(i, t)] * b[(j, t)];
    }
    s
}

fn row_sqdist(a: &DMatrix<f64>, i: usize, b: &DMatrix<f64>, j: usize) -> f64 {
    let mut s = 0.0;
    for t in 0..a.ncols() {
        let d = a[(i, t)] - b[(j, t)];
        s += d * d;
    }
    s
}

fn pairwise<F: Fn(usize, usize) -> f64>(n: usize, m: usize, f: F) -> DMatrix<f64> {
    DMatrix::from_fn(n, m, |i, j| f(i, j))
}

// ---------------------------------------------------------------------------
// centring
// ---------------------------------------------------------------------------

/// Column means and grand mean of an uncentred training self-Gram.
pub fn centring_stats(raw_self: &DMatrix<f64>) -> CentringStats {
    let n = raw_self.nrows();
    let mut col_means = vec![0.0; raw_self.ncols()];
    for j in 0..raw_self.ncols() {
        let mut s = 0.0;
        for i in 0..n {
            s += raw_self[(i, j)];
        }
        col_means[j] = s / n as f64;
    }
    let grand_mean = col_means.iter().sum::<f64>() / col_means.len() as f64;
    CentringStats { col_means, grand_mean }
}

/// h_cen(x_i, y_j) = h(x_i, y_j) - mean_k h(x_i, x_k) - mean_k h(x_k, y_j) + grand mean,
/// with all means over the training points (the rows).
pub(crate) fn centre_values(raw: &DMatrix<f64>, stats: &CentringStats) -> DMatrix<f64> {
    let n = raw.nrows();
    let m = raw.ncols();
    let mut cross_col_means = vec![0.0; m];
    for j in 0..m {
        let mut s = 0.0;
        for i in 0..n {
            s += raw[(i, j)];
        }
        cross_col_means[j] = s / n as f64;
    }
    DMatrix::from_fn(n, m, |i, j| {
        raw[(i, j)] - stats.col_means[i] - cross_col_means[j] + stats.grand_mean
    })
}

/// Centre an uncentred Gram. Without `stats` the input must be a training
/// self-Gram (stats are computed from it and returned for reuse on
/// cross-Grams); with `stats` the input is a cross-Gram of training rows
/// against new columns.
pub fn centre_gram(h: &GramMatrix, stats: Option<&CentringStats>) -> Result<GramMatrix> {
    let values = &h.values;
    match stats {
        None => {
            if values.nrows() != values.ncols() {
                return Err(Error::DimensionMismatch(
                    "self-Gram centring requires a square matrix".into(),
                ));
            }
            let s = centring_stats(values);
            let centred = centre_values(values, &s);
            Ok(GramMatrix { values: centred, centred: true, stats: Some(s) })
        }
        Some(s) => {
            if s.col_means.len() != values.nrows() {
                return Err(Error::DimensionMismatch(format!(
                    "centring stats cover {} training points but Gram has {} rows",
                    s.col_means.len(),
                    values.nrows()
                )));
            }
            let centred = centre_values(values, s);
            Ok(GramMatrix { values: centred, centred: true, stats: Some(s.clone()) })
        }
    }
}

/// Pairwise kernel evaluator with precomputed features; entry (i, j) is
/// h(x_i, y_j) with y defaulting to x. For the polynomial kernel this
/// evaluates the raw inner product only; the power and scale are applied by
/// the caller.
pub(crate) enum PairEval {
    Pearson { codes_x: Vec<usize>, codes_y: Vec<usize>, counts: Vec<usize>, n_train: f64 },
    Dot { fx: DMatrix<f64>, fy: Option<DMatrix<f64>> },
    Fbm { fx: DMatrix<f64>, fy: Option<DMatrix<f64>>, gamma: f64, xnorm: Vec<f64>, ynorm: Vec<f64> },
    Se { fx: DMatrix<f64>, fy: Option<DMatrix<f64>>, denom: f64 },
}

impl PairEval {
    pub(crate) fn new(
        spec: &KernelSpec,
        x: &CovariateColumn,
        y: Option<&CovariateColumn>,
    ) -> Result<PairEval> {
        spec.validate()?;
        match spec {
            KernelSpec::Pearson => {
                let cx = match x {
                    CovariateColumn::Categorical(c) => c,
                    _ => {
                        return Err(Error::KernelInput(
                            "pearson kernel requires a categorical column".into(),
                        ))
                    }
                };
                let codes_y: Vec<usize> = match y {
                    None => cx.codes.clone(),
                    Some(CovariateColumn::Categorical(cy)) => cx.codes_against(cy)?,
                    Some(_) => {
                        return Err(Error::KernelInput(
                            "pearson kernel requires a categorical column".into(),
                        ))
                    }
                };
                Ok(PairEval::Pearson {
                    codes_x: cx.codes.clone(),
                    codes_y,
                    counts: cx.counts.clone(),
                    n_train: cx.len() as f64,
                })
            }
            KernelSpec::Linear | KernelSpec::Poly { .. } => {
                let (fx, fy) = feature_pair(x, y)?;
                Ok(PairEval::Dot { fx, fy })
            }
            KernelSpec::Fbm { gamma } => {
                let g = *gamma;
                let (fx, fy) = feature_pair(x, y)?;
                let xnorm: Vec<f64> =
                    (0..fx.nrows()).map(|i| row_dot(&fx, i, &fx, i).powf(g)).collect();
                let ynorm: Vec<f64> = match &fy {
                    None => xnorm.clone(),
                    Some(f) => (0..f.nrows()).map(|j| row_dot(f, j, f, j).powf(g)).collect(),
                };
                Ok(PairEval::Fbm { fx, fy, gamma: g, xnorm, ynorm })
            }
            KernelSpec::Se { lengthscale } => {
                let (fx, fy) = feature_pair(x, y)?;
                Ok(PairEval::Se { fx, fy, denom: 2.0 * lengthscale * lengthscale })
            }
        }
    }

    pub(crate) fn nx(&self) -> usize {
        match self {
            PairEval::Pearson { codes_x, .. } => codes_x.len(),
            PairEval::Dot { fx, .. } | PairEval::Fbm { fx, .. } | PairEval::Se { fx, .. } => {
                fx.nrows()
            }
        }
    }

    pub(crate) fn ny(&self) -> usize {
        match self {
            PairEval::Pearson { codes_y, .. } => codes_y.len(),
            PairEval::Dot { fx, fy } | PairEval::Se { fx, fy, .. } => {
                fy.as_ref().unwrap_or(fx).nrows()
            }
            PairEval::Fbm { fx, fy, .. } => fy.as_ref().unwrap_or(fx).nrows(),
        }
    }

    pub(crate) fn eval(&self, i: usize, j: usize) -> f64 {
        match self {
            PairEval::Pearson { codes_x, codes_y, counts, n_train } => {
                if codes_x[i] == codes_y[j] {
                    n_train / counts[codes_x[i]] as f64 - 1.0
                } else {
                    -1.0
                }
            }
            PairEval::Dot { fx, fy } => row_dot(fx, i, fy.as_ref().unwrap_or(fx), j),
            PairEval::Fbm { fx, fy, gamma, xnorm, ynorm } => {
                let fyr = fy.as_ref().unwrap_or(fx);
                -0.5 * (row_sqdist(fx, i, fyr, j).powf(*gamma) - xnorm[i] - ynorm[j])
            }
            PairEval::Se { fx, fy, denom } => {
                (-row_sqdist(fx, i, fy.as_ref().unwrap_or(fx), j) / denom).exp()
            }
        }
    }

    pub(crate) fn materialise(&self) -> DMatrix<f64> {
        pairwise(self.nx(), self.ny(), |i, j| self.eval(i, j))
    }

    /// Column means and grand mean of the full training self-Gram without
    /// materialising it (O(n) storage); identical summation order to
    /// [`centring_stats`] on the materialised matrix.
    pub(crate) fn streaming_stats(&self) -> CentringStats {
        let n = self.nx();
        let mut col_means = vec![0.0; n];
        for j in 0..n {
            let mut s = 0.0;
            for i in 0..n {
                s += self.eval(i, j);
            }
            col_means[j] = s / n as f64;
        }
        let grand_mean = col_means.iter().sum::<f64>() / n as f64;
        CentringStats { col_means, grand_mean }
    }

    /// Selected raw rows (by training index) against all columns.
    pub(crate) fn rows(&self, rows: &[usize]) -> DMatrix<f64> {
        pairwise(rows.len(), self.ny(), |r, j| self.eval(rows[r], j))
    }
}

/// Raw (uncentred) kernel values for any of the five kernels.
/// For the polynomial kernel this is the raw inner product only; the power
/// and scale are applied by the caller.
pub(crate) fn raw_values(
    spec: &KernelSpec,
    x: &CovariateColumn,
    y: Option<&CovariateColumn>,
) -> Result<DMatrix<f64>> {
    Ok(PairEval::new(spec, x, y)?.materialise())
}

fn finish(raw: DMatrix<f64>, centre: bool) -> Result<GramMatrix> {
    if centre {
        centre_gram(&GramMatrix { values: raw, centred: false, stats: None }, None)
    } else {
        Ok(GramMatrix { values: raw, centred: false, stats: None })
    }
}

fn finish_cross(
    spec: &KernelSpec,
    x: &CovariateColumn,
    raw: DMatrix<f64>,
    centre: bool,
) -> Result<GramMatrix> {
    if centre {
        let self_raw = raw_values(spec, x, None)?;
        let stats = centring_stats(&self_raw);
        centre_gram(&GramMatrix { values: raw, centred: false, stats: None }, Some(&stats))
    } else {
        Ok(GramMatrix { values: raw, centred: false, stats: None })
    }
}

fn kern_inner(
    spec: &KernelSpec,
    x: &CovariateColumn,
    y: Option<&CovariateColumn>,
    centre: bool,
) -> Result<GramMatrix> {
    let raw = raw_values(spec, x, y)?;
    match y {
        None => finish(raw, centre),
        Some(_) => finish_cross(spec, x, raw, centre),
    }
}

// ---------------------------------------------------------------------------
// the five kernels
// ---------------------------------------------------------------------------

/// Canonical linear kernel h(x, x') = <x, x'>. Entry [i, j] = <x_i, y_j>.
pub fn kern_linear(
    x: &CovariateColumn,
    y: Option<&CovariateColumn>,
    centre: bool,
) -> Result<GramMatrix> {
    kern_inner(&KernelSpec::Linear, x, y, centre)
}

/// Fractional Brownian motion kernel with Hurst coefficient gamma in (0,1):
/// h(x, x') = -1/2 (|x - x'|^2g - |x|^2g - |x'|^2g).
pub fn kern_fbm(
    x: &CovariateColumn,
    y: Option<&CovariateColumn>,
    gamma: f64,
    centre: bool,
) -> Result<GramMatrix> {
    kern_inner(&KernelSpec::Fbm { gamma }, x, y, centre)
}

/// Squared exponential kernel h(x, x') = exp(-|x - x'|^2 / (2 l^2)).
pub fn kern_se(
    x: &CovariateColumn,
    y: Option<&CovariateColumn>,
    lengthscale: f64,
    centre: bool,
) -> Result<GramMatrix> {
    kern_inner(&KernelSpec::Se { lengthscale }, x, y, centre)
}

/// Polynomial kernel h(x, x') = (lambda <x, x'> + c)^d.
///
/// Unlike the other kernels the scale sits inside the power, so this
/// operation consumes lambda directly. When centring is requested, the inner
/// product inside is centred, not the resulting kernel values.
pub fn kern_poly(
    x: &CovariateColumn,
    y: Option<&CovariateColumn>,
    degree: u32,
    offset: f64,
    lambda: f64,
    centre: bool,
) -> Result<GramMatrix> {
    let spec = KernelSpec::Poly { degree, offset };
    spec.validate()?;
    let inner = kern_inner(&spec, x, y, centre)?;
    let values = poly_transform(&inner.values, lambda, offset, degree);
    Ok(GramMatrix { values, centred: inner.centred, stats: inner.stats })
}

/// Elementwise (lambda g + c)^d applied to an inner-product Gram.
pub(crate) fn poly_transform(
    inner: &DMatrix<f64>,
    lambda: f64,
    offset: f64,
    degree: u32,
) -> DMatrix<f64> {
    inner.map(|g| (lambda * g + offset).powi(degree as i32))
}

/// Pearson kernel for categorical covariates:
/// h(x, x') = delta_{xx'} / P(X = x) - 1 under the empirical training
/// distribution of `x`. Labels of `y` unseen in `x` are a hard error.
pub fn kern_pearson(x: &CovariateColumn, y: Option<&CovariateColumn>) -> Result<GramMatrix> {
    // Centring is a no-op for the Pearson kernel (row sums already vanish),
    // so only the raw form is exposed.
    let raw = raw_values(&KernelSpec::Pearson, x, y)?;
    Ok(GramMatrix { values: raw, centred: false, stats: None })
}

/// Dispatch on a kernel spec: the Gram (centred unless Pearson, which is
/// self-centring) used by the model loader for one covariate.
pub fn kern_for_spec(
    spec: &KernelSpec,
    x: &CovariateColumn,
    y: Option<&CovariateColumn>,
    lambda: f64,
    centre: bool,
) -> Result<GramMatrix> {
    match spec {
        KernelSpec::Linear => kern_linear(x, y, centre),
        KernelSpec::Fbm { gamma } => kern_fbm(x, y, *gamma, centre),
        KernelSpec::Se { lengthscale } => kern_se(x, y, *lengthscale, centre),
        KernelSpec::Poly { degree, offset } => kern_poly(x, y, *degree, *offset, lambda, centre),
        KernelSpec::Pearson => kern_pearson(x, y),
    }
}

/// Sobolev-Hilbert inner product of two discretised curves on a shared
/// regular grid: sum over t of (z_{t+1} - z_t)(z'_{t+1} - z'_t).
pub fn sobolev_inner_product(z: &[f64], zp: &[f64]) -> Result<f64> {
    if z.len() != zp.len() {
        return Err(Error::DimensionMismatch(format!(
            "curve lengths differ: {} vs {}",
            z.len(),
            zp.len()
        )));
    }
    if z.len() < 2 {
        return Err(Error::DimensionMismatch("curves need T >= 2".into()));
    }
    let mut s = 0.0;
    for t in 0..z.len() - 1 {
        s += (z[t + 1] - z[t]) * (zp[t + 1] - zp[t]);
    }
    Ok(s)
}
