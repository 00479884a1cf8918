//! Model assembly: turns a model specification plus a data table into an
//! estimable model — per-covariate centred Grams, tensor-product interaction
//! terms, the hyperparameter layout, and the unconstrained
//! reparameterisation used by the optimisers.

use std::borrow::Cow;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{numeric_label, DataColumn, DataTable};
use crate::error::{Error, Result};
use crate::kernels::{
    centre_values, centring_stats, poly_transform, CategoricalColumn, CentringStats,
    CovariateColumn, KernelSpec, PairEval,
};
use crate::linalg::{nystrom_eigen, sym_eigen, SigmaFactor};
use crate::stats::{std_normal_cdf, std_normal_pdf, std_normal_quantile};

/// How a raw data column should be interpreted for a covariate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    #[default]
    Auto,
    Categorical,
    Functional,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovariateSpec {
    pub name: String,
    /// None lets the loader pick: Pearson for categorical columns, linear
    /// otherwise.
    pub kernel: Option<KernelSpec>,
    #[serde(default)]
    pub role: Role,
}

/// Which hyperparameters to estimate. `fixed_hyp`, when set, overrides all
/// the individual toggles.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimationFlags {
    pub est_lambda: bool,
    pub est_hurst: bool,
    pub est_lengthscale: bool,
    pub est_offset: bool,
    pub est_psi: bool,
    pub fixed_hyp: Option<bool>,
}

impl Default for EstimationFlags {
    fn default() -> Self {
        EstimationFlags {
            est_lambda: true,
            est_hurst: false,
            est_lengthscale: false,
            est_offset: false,
            est_psi: true,
            fixed_hyp: None,
        }
    }
}

impl EstimationFlags {
    /// Flags with the `fixed_hyp` override applied: `Some(true)` fixes
    /// everything, `Some(false)` estimates everything.
    pub fn effective(&self) -> EstimationFlags {
        match self.fixed_hyp {
            None => *self,
            Some(fixed) => EstimationFlags {
                est_lambda: !fixed,
                est_hurst: !fixed,
                est_lengthscale: !fixed,
                est_offset: !fixed,
                est_psi: !fixed,
                fixed_hyp: self.fixed_hyp,
            },
        }
    }
}

/// Nystrom activation: off, on with the default active-set size of
/// ceil(0.10 n), or an explicit size m. Serialises as `false`, `true` or the
/// integer m.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum NystromOption {
    #[default]
    Off,
    Auto,
    Size(usize),
}

impl Serialize for NystromOption {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            NystromOption::Off => s.serialize_bool(false),
            NystromOption::Auto => s.serialize_bool(true),
            NystromOption::Size(m) => s.serialize_u64(*m as u64),
        }
    }
}

impl<'de> Deserialize<'de> for NystromOption {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl serde::de::Visitor<'_> for V {
            type Value = NystromOption;
            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("a boolean or a non-negative integer")
            }
            fn visit_bool<E>(self, v: bool) -> std::result::Result<NystromOption, E> {
                Ok(if v { NystromOption::Auto } else { NystromOption::Off })
            }
            fn visit_u64<E: serde::de::Error>(
                self,
                v: u64,
            ) -> std::result::Result<NystromOption, E> {
                Ok(NystromOption::Size(v as usize))
            }
            fn visit_i64<E: serde::de::Error>(
                self,
                v: i64,
            ) -> std::result::Result<NystromOption, E> {
                if v < 0 {
                    Err(E::custom("nystrom size must be non-negative"))
                } else {
                    Ok(NystromOption::Size(v as usize))
                }
            }
        }
        d.deserialize_any(V)
    }
}

impl NystromOption {
    fn size(&self, n: usize) -> Result<Option<usize>> {
        let m = match self {
            NystromOption::Off => return Ok(None),
            NystromOption::Auto => (0.10 * n as f64).ceil() as usize,
            NystromOption::Size(m) => *m,
        };
        if m < 2 || m >= n {
            return Err(Error::InvalidParam(format!(
                "nystrom size m = {m} must satisfy 2 <= m < n = {n}"
            )));
        }
        Ok(Some(m))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub response: String,
    pub covariates: Vec<CovariateSpec>,
    /// Pairwise tensor-product interactions, 0-based covariate indices.
    #[serde(default)]
    pub interactions: Vec<(usize, usize)>,
    #[serde(default)]
    pub flags: EstimationFlags,
    /// Fixed/initial scale parameters, one per covariate (default 1).
    #[serde(default)]
    pub lambda0: Option<Vec<f64>>,
    /// Fixed/initial error precision (default 1).
    #[serde(default)]
    pub psi0: Option<f64>,
    #[serde(default)]
    pub nystrom: NystromOption,
    #[serde(default)]
    pub nys_seed: Option<u64>,
}

impl ModelSpec {
    /// Parse a 1-based "a:b" interaction string.
    pub fn parse_interaction(s: &str) -> Result<(usize, usize)> {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 2 {
            return Err(Error::Parse(format!("interaction `{s}` is not of the form a:b")));
        }
        let a: usize = parts[0]
            .trim()
            .parse()
            .map_err(|_| Error::Parse(format!("interaction index `{}`", parts[0])))?;
        let b: usize = parts[1]
            .trim()
            .parse()
            .map_err(|_| Error::Parse(format!("interaction index `{}`", parts[1])))?;
        if a == 0 || b == 0 {
            return Err(Error::Parse("interaction indices are 1-based".into()));
        }
        Ok((a - 1, b - 1))
    }

    fn validate(&self) -> Result<()> {
        if self.covariates.is_empty() {
            return Err(Error::Spec("model needs at least one covariate".into()));
        }
        let p = self.covariates.len();
        let mut seen = std::collections::HashSet::new();
        for &(a, b) in &self.interactions {
            if a >= p || b >= p {
                return Err(Error::Spec(format!(
                    "interaction {}:{} references an undeclared covariate",
                    a + 1,
                    b + 1
                )));
            }
            if a == b {
                return Err(Error::Spec("interaction of a covariate with itself".into()));
            }
            if !seen.insert((a.min(b), a.max(b))) {
                return Err(Error::Spec(format!("duplicate interaction {}:{}", a + 1, b + 1)));
            }
        }
        if let Some(l0) = &self.lambda0 {
            if l0.len() != p {
                return Err(Error::Spec(format!(
                    "lambda0 has {} entries for {} covariates",
                    l0.len(),
                    p
                )));
            }
        }
        if let Some(psi0) = self.psi0 {
            if !(psi0 > 0.0) {
                return Err(Error::Spec("psi0 must be positive".into()));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// hyperparameter layout and transforms
// ---------------------------------------------------------------------------

/// Bijection between one natural-scale hyperparameter and its unconstrained
/// slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Transform {
    Identity,
    Log,
    /// Standard-normal quantile: theta = Phi^-1(param), param in (0,1).
    Probit,
}

impl Transform {
    pub fn to_natural(self, theta: f64) -> f64 {
        match self {
            Transform::Identity => theta,
            Transform::Log => theta.exp(),
            Transform::Probit => std_normal_cdf(theta),
        }
    }

    pub fn to_theta(self, param: f64) -> Result<f64> {
        match self {
            Transform::Identity => Ok(param),
            Transform::Log => {
                if param > 0.0 {
                    Ok(param.ln())
                } else {
                    Err(Error::InvalidParam(format!(
                        "log-transformed hyperparameter must be positive, got {param}"
                    )))
                }
            }
            Transform::Probit => {
                if param > 0.0 && param < 1.0 {
                    Ok(std_normal_quantile(param))
                } else {
                    Err(Error::InvalidParam(format!(
                        "probit-transformed hyperparameter must lie in (0,1), got {param}"
                    )))
                }
            }
        }
    }

    /// d(natural)/d(theta), for the chain rule and the delta method.
    pub fn dnatural_dtheta(self, theta: f64) -> f64 {
        match self {
            Transform::Identity => 1.0,
            Transform::Log => theta.exp(),
            Transform::Probit => std_normal_pdf(theta),
        }
    }

    fn decorate(self, name: &str) -> String {
        match self {
            Transform::Identity => name.to_owned(),
            Transform::Log => format!("log({name})"),
            Transform::Probit => format!("qnorm({name})"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SlotKind {
    /// Scale parameter of covariate k.
    Lambda(usize),
    /// Tunable kernel parameter (Hurst, lengthscale or offset) of covariate k.
    KernelParam(usize),
    Psi,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Slot {
    pub kind: SlotKind,
    pub transform: Transform,
}

/// Natural-scale hyperparameters: one scale per covariate, the tunable
/// kernel parameter per covariate (where the kernel has one), and the error
/// precision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub lambda: Vec<f64>,
    pub kernel_params: Vec<Option<f64>>,
    pub psi: f64,
}

/// Ordered unconstrained slots (estimated lambdas, then estimated kernel
/// parameters in covariate order, then log psi) plus the fixed baseline for
/// everything not estimated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThetaLayout {
    pub slots: Vec<Slot>,
    pub base: ParamVector,
    /// Covariate kernels, used for slot naming.
    kernel_kinds: Vec<KernelSpec>,
    single_lambda: bool,
}

impl ThetaLayout {
    fn build(spec: &ModelSpec, kernels: &[KernelSpec], psi_identity: bool) -> ThetaLayout {
        let flags = spec.flags.effective();
        let p = kernels.len();
        let single_lambda = p == 1;
        let mut slots = Vec::new();
        if flags.est_lambda {
            let t = if single_lambda { Transform::Log } else { Transform::Identity };
            for k in 0..p {
                slots.push(Slot { kind: SlotKind::Lambda(k), transform: t });
            }
        }
        for (k, kern) in kernels.iter().enumerate() {
            let est = match kern {
                KernelSpec::Fbm { .. } => flags.est_hurst,
                KernelSpec::Se { .. } => flags.est_lengthscale,
                KernelSpec::Poly { .. } => flags.est_offset,
                _ => false,
            };
            if est {
                let transform = match kern {
                    KernelSpec::Fbm { .. } => Transform::Probit,
                    _ => Transform::Log,
                };
                slots.push(Slot { kind: SlotKind::KernelParam(k), transform });
            }
        }
        if flags.est_psi {
            let transform = if psi_identity { Transform::Identity } else { Transform::Log };
            slots.push(Slot { kind: SlotKind::Psi, transform });
        }
        let base = ParamVector {
            lambda: spec.lambda0.clone().unwrap_or_else(|| vec![1.0; p]),
            kernel_params: kernels.iter().map(|k| k.tunable_param()).collect(),
            psi: spec.psi0.unwrap_or(1.0),
        };
        ThetaLayout { slots, base, kernel_kinds: kernels.to_vec(), single_lambda }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    fn slot_base_name(&self, kind: SlotKind) -> String {
        match kind {
            SlotKind::Lambda(k) => {
                if self.single_lambda {
                    "lambda".to_owned()
                } else {
                    format!("lambda[{}]", k + 1)
                }
            }
            SlotKind::KernelParam(k) => {
                let pname = match self.kernel_kinds[k] {
                    KernelSpec::Fbm { .. } => "hurst",
                    KernelSpec::Se { .. } => "lengthscale",
                    KernelSpec::Poly { .. } => "offset",
                    _ => "param",
                };
                format!("{pname}[{}]", k + 1)
            }
            SlotKind::Psi => "psi".to_owned(),
        }
    }

    /// True when the layout carries a single log-transformed scale slot
    /// (one-covariate models; the scale's sign is then unidentified).
    pub fn single_lambda_log_slot(&self) -> bool {
        self.slots
            .iter()
            .any(|s| matches!((s.kind, s.transform), (SlotKind::Lambda(_), Transform::Log)))
    }

    /// Plain slot names, e.g. `lambda[1], lambda[2], hurst[1], psi`.
    pub fn names(&self) -> Vec<String> {
        self.slots.iter().map(|s| self.slot_base_name(s.kind)).collect()
    }

    /// Transform-decorated slot names, e.g. `log(lambda), qnorm(hurst[2])`.
    pub fn decorated_names(&self) -> Vec<String> {
        self.slots.iter().map(|s| s.transform.decorate(&self.slot_base_name(s.kind))).collect()
    }
}

/// Map an unconstrained theta vector onto the natural scale, starting from
/// the layout's fixed baseline.
pub fn theta_to_param(layout: &ThetaLayout, theta: &DVector<f64>) -> Result<ParamVector> {
    if theta.len() != layout.slots.len() {
        return Err(Error::DimensionMismatch(format!(
            "theta has {} entries, layout has {} slots",
            theta.len(),
            layout.slots.len()
        )));
    }
    if theta.iter().any(|t| !t.is_finite()) {
        return Err(Error::Numerical("non-finite theta".into()));
    }
    let mut param = layout.base.clone();
    for (slot, &t) in layout.slots.iter().zip(theta.iter()) {
        let v = slot.transform.to_natural(t);
        match slot.kind {
            SlotKind::Lambda(k) => param.lambda[k] = v,
            SlotKind::KernelParam(k) => param.kernel_params[k] = Some(v),
            SlotKind::Psi => param.psi = v,
        }
    }
    Ok(param)
}

/// Exact inverse of [`theta_to_param`] on valid natural-scale parameters.
pub fn param_to_theta(layout: &ThetaLayout, param: &ParamVector) -> Result<DVector<f64>> {
    let mut theta = DVector::zeros(layout.slots.len());
    for (i, slot) in layout.slots.iter().enumerate() {
        let v = match slot.kind {
            SlotKind::Lambda(k) => param.lambda[k],
            SlotKind::KernelParam(k) => param.kernel_params[k].ok_or_else(|| {
                Error::InvalidParam("kernel parameter missing for estimated slot".into())
            })?,
            SlotKind::Psi => param.psi,
        };
        theta[i] = slot.transform.to_theta(v)?;
    }
    Ok(theta)
}

// ---------------------------------------------------------------------------
// loaded model
// ---------------------------------------------------------------------------

/// Centred per-term Gram matrices. Under Nystrom, matrices are m x n (active
/// rows against all points); otherwise n x n. For polynomial covariates the
/// stored matrix is the centred linear inner product and the power is
/// applied at scaling time.
#[derive(Clone, Debug, PartialEq)]
pub struct TermGrams {
    pub cov: Vec<DMatrix<f64>>,
    pub stats: Vec<CentringStats>,
    /// Precomputed Hadamard products for interactions whose constituents are
    /// both scale-linear (neither polynomial).
    pub inter: Vec<Option<DMatrix<f64>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NystromState {
    pub m: usize,
    /// Active training indices, ascending.
    pub active: Vec<usize>,
    /// Row order used by the block factorisation: active then complement.
    pub row_order: Vec<usize>,
}

/// An I-prior model readied for estimation: data, centred Grams, and the
/// hyperparameter layout. Immutable after construction; estimation never
/// mutates it, so it can be shared across concurrent restart runs.
#[derive(Clone, Debug)]
pub struct LoadedModel {
    pub spec: ModelSpec,
    pub n: usize,
    pub y: DVector<f64>,
    pub y_mean: f64,
    /// Centred response, y - mean(y).
    pub y_centred: DVector<f64>,
    pub covariates: Vec<CovariateColumn>,
    pub kernels: Vec<KernelSpec>,
    pub layout: ThetaLayout,
    pub grams: TermGrams,
    pub nystrom: Option<NystromState>,
}

fn resolve_column(spec: &CovariateSpec, col: &DataColumn) -> Result<CovariateColumn> {
    let out = match (spec.role, col) {
        (Role::Categorical, DataColumn::Categorical(labels)) => {
            CovariateColumn::Categorical(CategoricalColumn::from_labels(labels))
        }
        (Role::Categorical, DataColumn::Numeric(v)) => {
            let labels: Vec<String> = v.iter().map(|&x| numeric_label(x)).collect();
            CovariateColumn::Categorical(CategoricalColumn::from_labels(&labels))
        }
        (Role::Categorical, DataColumn::Matrix(_)) => {
            return Err(Error::Data(format!(
                "covariate `{}`: a matrix column cannot be categorical",
                spec.name
            )))
        }
        (Role::Functional, DataColumn::Matrix(m)) => CovariateColumn::Functional(m.clone()),
        (Role::Functional, _) => {
            return Err(Error::Data(format!(
                "covariate `{}`: functional covariates need a matrix of curves",
                spec.name
            )))
        }
        (Role::Auto, DataColumn::Categorical(labels)) => {
            CovariateColumn::Categorical(CategoricalColumn::from_labels(labels))
        }
        (Role::Auto, DataColumn::Numeric(v)) => {
            CovariateColumn::Continuous(DMatrix::from_column_slice(v.len(), 1, v))
        }
        (Role::Auto, DataColumn::Matrix(m)) => CovariateColumn::Continuous(m.clone()),
    };
    out.validate()?;
    Ok(out)
}

fn resolve_kernel(spec: &CovariateSpec, col: &CovariateColumn) -> Result<KernelSpec> {
    let is_cat = matches!(col, CovariateColumn::Categorical(_));
    match (&spec.kernel, is_cat) {
        (None, true) => Ok(KernelSpec::Pearson),
        (None, false) => Ok(KernelSpec::Linear),
        (Some(KernelSpec::Pearson), true) => Ok(KernelSpec::Pearson),
        (Some(KernelSpec::Pearson), false) => Err(Error::KernelInput(format!(
            "covariate `{}`: pearson kernel on a continuous column; declare it categorical to coerce labels",
            spec.name
        ))),
        (Some(k), true) => Err(Error::KernelInput(format!(
            "covariate `{}`: categorical columns take the pearson kernel, not {}",
            spec.name,
            k.name()
        ))),
        (Some(k), false) => {
            k.validate()?;
            Ok(k.clone())
        }
    }
}

/// Base Gram of one covariate (dense path): centred kernel values, or the
/// centred linear inner product for polynomial kernels.
fn covariate_gram_dense(
    kernel: &KernelSpec,
    col: &CovariateColumn,
) -> Result<(DMatrix<f64>, CentringStats)> {
    let base_spec = if kernel.is_poly() { KernelSpec::Linear } else { kernel.clone() };
    let ev = PairEval::new(&base_spec, col, None)?;
    let raw = ev.materialise();
    let stats = centring_stats(&raw);
    let centred = centre_values(&raw, &stats);
    Ok((centred, stats))
}

/// Base Gram of one covariate under Nystrom: the active rows of the exact
/// centred Gram (m x n), with centring statistics taken over all n training
/// points so the rows coincide with the corresponding rows of the dense
/// centred Gram.
fn covariate_gram_nystrom(
    kernel: &KernelSpec,
    col: &CovariateColumn,
    active: &[usize],
) -> Result<(DMatrix<f64>, CentringStats)> {
    let base_spec = if kernel.is_poly() { KernelSpec::Linear } else { kernel.clone() };
    let ev = PairEval::new(&base_spec, col, None)?;
    let stats = ev.streaming_stats();
    let mut centred = ev.rows(active);
    for r in 0..active.len() {
        let rm = stats.col_means[active[r]];
        for j in 0..centred.ncols() {
            centred[(r, j)] = centred[(r, j)] - rm - stats.col_means[j] + stats.grand_mean;
        }
    }
    Ok((centred, stats))
}

fn build_term_grams(
    kernels: &[KernelSpec],
    covariates: &[CovariateColumn],
    interactions: &[(usize, usize)],
    active: Option<&[usize]>,
) -> Result<TermGrams> {
    let mut cov = Vec::with_capacity(kernels.len());
    let mut stats = Vec::with_capacity(kernels.len());
    for (kern, col) in kernels.iter().zip(covariates) {
        let (g, s) = match active {
            None => covariate_gram_dense(kern, col)?,
            Some(act) => covariate_gram_nystrom(kern, col, act)?,
        };
        cov.push(g);
        stats.push(s);
    }
    let inter = interactions
        .iter()
        .map(|&(a, b)| {
            if kernels[a].is_poly() || kernels[b].is_poly() {
                None
            } else {
                Some(cov[a].component_mul(&cov[b]))
            }
        })
        .collect();
    Ok(TermGrams { cov, stats, inter })
}

/// Ready an I-prior model for estimation: compute and centre the per-term
/// Grams, store the response centring, build the hyperparameter layout, and
/// perform Nystrom sampling when requested.
pub fn load_model(spec: &ModelSpec, data: &DataTable) -> Result<LoadedModel> {
    spec.validate()?;
    let y = match data.require_column(&spec.response)? {
        DataColumn::Numeric(v) => DVector::from_vec(v.clone()),
        _ => return Err(Error::NonNumeric(spec.response.clone())),
    };
    let n = y.len();
    if n == 0 {
        return Err(Error::Data("empty data table".into()));
    }

    let mut covariates = Vec::with_capacity(spec.covariates.len());
    let mut kernels = Vec::with_capacity(spec.covariates.len());
    for cspec in &spec.covariates {
        let raw = match cspec.role {
            Role::Functional => DataColumn::Matrix(data.gather_prefix(&cspec.name)?),
            _ => data.require_column(&cspec.name)?.clone(),
        };
        if raw.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "covariate `{}` has {} rows, response has {n}",
                cspec.name,
                raw.len()
            )));
        }
        let col = resolve_column(cspec, &raw)?;
        let kern = resolve_kernel(cspec, &col)?;
        covariates.push(col);
        kernels.push(kern);
    }

    let nystrom = match spec.nystrom.size(n)? {
        None => None,
        Some(m) => {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.nys_seed.unwrap_or(1));
            let mut active = rand::seq::index::sample(&mut rng, n, m).into_vec();
            active.sort_unstable();
            let mut row_order = active.clone();
            row_order.extend((0..n).filter(|i| active.binary_search(i).is_err()));
            Some(NystromState { m, active, row_order })
        }
    };

    let grams = build_term_grams(
        &kernels,
        &covariates,
        &spec.interactions,
        nystrom.as_ref().map(|s| s.active.as_slice()),
    )?;

    let layout = ThetaLayout::build(spec, &kernels, false);
    let y_mean = y.sum() / n as f64;
    let y_centred = y.map(|v| v - y_mean);
    Ok(LoadedModel {
        spec: spec.clone(),
        n,
        y,
        y_mean,
        y_centred,
        covariates,
        kernels,
        layout,
        grams,
        nystrom,
    })
}

impl LoadedModel {
    /// Number of Gram terms (main effects plus interactions).
    pub fn n_terms(&self) -> usize {
        self.grams.cov.len() + self.spec.interactions.len()
    }

    pub fn is_nystrom(&self) -> bool {
        self.nystrom.is_some()
    }

    /// Human-readable theta layout, e.g.
    /// `lambda[1], lambda[2], qnorm(hurst[2]), log(psi)`.
    pub fn check_theta(&self) -> String {
        self.layout.decorated_names().join(", ")
    }

    /// Plain hyperparameter names for summaries.
    pub fn hyperparameter_names(&self) -> Vec<String> {
        self.layout.names()
    }

    pub fn available_methods(&self) -> String {
        if self.is_nystrom() {
            "direct (Nystrom), fixed (Nystrom)".into()
        } else {
            "direct, em, mixed, fixed".into()
        }
    }

    /// Bytes held by the stored Gram matrices.
    pub fn gram_bytes(&self) -> usize {
        let mut total = 0;
        for g in &self.grams.cov {
            total += g.len() * std::mem::size_of::<f64>();
        }
        for g in self.grams.inter.iter().flatten() {
            total += g.len() * std::mem::size_of::<f64>();
        }
        total
    }

    /// True when `param` carries the same kernel parameters as the loaded
    /// base Grams (the common case when no kernel parameter is estimated).
    fn kernel_params_match_base(&self, param: &ParamVector) -> bool {
        self.layout.base.kernel_params.iter().zip(&param.kernel_params).all(|(a, b)| {
            match (a, b) {
                (Some(x), Some(y)) => x.to_bits() == y.to_bits(),
                (None, None) => true,
                _ => false,
            }
        })
    }

    /// Term Grams evaluated at `param`'s kernel parameters: the stored base
    /// when they match, otherwise recomputed.
    pub fn grams_at(&self, param: &ParamVector) -> Result<Cow<'_, TermGrams>> {
        if self.kernel_params_match_base(param) {
            return Ok(Cow::Borrowed(&self.grams));
        }
        let kernels: Vec<KernelSpec> = self
            .kernels
            .iter()
            .zip(&param.kernel_params)
            .map(|(k, p)| match p {
                Some(v) => k.with_tunable_param(*v),
                None => k.clone(),
            })
            .collect();
        for k in &kernels {
            k.validate()?;
        }
        let grams = build_term_grams(
            &kernels,
            &self.covariates,
            &self.spec.interactions,
            self.nystrom.as_ref().map(|s| s.active.as_slice()),
        )?;
        Ok(Cow::Owned(grams))
    }

    /// The effective kernel for covariate k at the given parameters.
    pub fn kernel_at(&self, k: usize, param: &ParamVector) -> KernelSpec {
        match param.kernel_params[k] {
            Some(v) => self.kernels[k].with_tunable_param(v),
            None => self.kernels[k].clone(),
        }
    }

    /// Test knob: rebuild the layout with the error precision left
    /// untransformed (identity slot instead of log psi).
    #[doc(hidden)]
    pub fn with_psi_identity_transform(mut self) -> Self {
        self.layout = ThetaLayout::build(&self.spec, &self.kernels, true);
        self
    }
}

/// Scale-adjusted term values for covariate k: lambda_k H_k, or the
/// elementwise (lambda_k g + c)^d for polynomial kernels. Works for any
/// matrix shape (training Grams and prediction cross-Grams alike).
pub(crate) fn scaled_values(
    kernel: &KernelSpec,
    values: &DMatrix<f64>,
    lambda: f64,
    kparam: Option<f64>,
) -> DMatrix<f64> {
    match kernel {
        KernelSpec::Poly { degree, .. } => {
            let offset = kparam.unwrap_or(KernelSpec::DEFAULT_OFFSET);
            poly_transform(values, lambda, offset, *degree)
        }
        _ => values * lambda,
    }
}

pub(crate) fn scaled_term(
    model: &LoadedModel,
    grams: &TermGrams,
    k: usize,
    param: &ParamVector,
) -> DMatrix<f64> {
    scaled_values(&model.kernels[k], &grams.cov[k], param.lambda[k], param.kernel_params[k])
}

/// Assemble H = sum_k (scaled term k) plus the Hadamard interaction terms.
/// `pre` carries precomputed unscaled Hadamard products for pairs whose
/// constituents both scale linearly; the same grouping is used on the
/// prediction path so training and cross computations agree bitwise.
pub(crate) fn combine_terms(
    model: &LoadedModel,
    values: &[DMatrix<f64>],
    pre: &[Option<DMatrix<f64>>],
    param: &ParamVector,
) -> DMatrix<f64> {
    let scaled: Vec<DMatrix<f64>> = (0..model.kernels.len())
        .map(|k| scaled_values(&model.kernels[k], &values[k], param.lambda[k], param.kernel_params[k]))
        .collect();
    let (r, c) = (scaled[0].nrows(), scaled[0].ncols());
    let mut h = DMatrix::zeros(r, c);
    for s in &scaled {
        h += s;
    }
    for (idx, &(a, b)) in model.spec.interactions.iter().enumerate() {
        match &pre[idx] {
            Some(p) => h += p * (param.lambda[a] * param.lambda[b]),
            None => h += scaled[a].component_mul(&scaled[b]),
        }
    }
    h
}

/// Assemble the model Gram H at the given hyperparameters and Gram set.
pub(crate) fn build_h_with(
    model: &LoadedModel,
    grams: &TermGrams,
    param: &ParamVector,
) -> DMatrix<f64> {
    combine_terms(model, &grams.cov, &grams.inter, param)
}

/// H_eta at the given parameters (n x n, or m x n under Nystrom).
pub fn build_h(model: &LoadedModel, param: &ParamVector) -> Result<DMatrix<f64>> {
    check_param(model, param)?;
    let grams = model.grams_at(param)?;
    Ok(build_h_with(model, &grams, param))
}

pub(crate) fn check_param(model: &LoadedModel, param: &ParamVector) -> Result<()> {
    if param.lambda.len() != model.kernels.len()
        || param.kernel_params.len() != model.kernels.len()
    {
        return Err(Error::DimensionMismatch(
            "parameter vector does not match the model's covariates".into(),
        ));
    }
    if param.lambda.iter().any(|l| !l.is_finite()) || !param.psi.is_finite() {
        return Err(Error::Numerical("non-finite hyperparameter".into()));
    }
    Ok(())
}

/// Spectral factor of Sigma at the given parameters: a full
/// eigendecomposition on the dense path, the Nystrom low-rank factor
/// otherwise.
pub fn sigma_factor_at(model: &LoadedModel, h: &DMatrix<f64>) -> Result<SigmaFactor> {
    match &model.nystrom {
        None => Ok(SigmaFactor::Dense(sym_eigen(h)?)),
        Some(state) => {
            let m = state.m;
            let n = model.n;
            let mut a = DMatrix::zeros(m, m);
            for r in 0..m {
                for s in 0..m {
                    a[(r, s)] = h[(r, state.active[s])];
                }
            }
            let mut b = DMatrix::zeros(m, n - m);
            for (s, &j) in state.row_order[m..].iter().enumerate() {
                for r in 0..m {
                    b[(r, s)] = h[(r, j)];
                }
            }
            let fac = nystrom_eigen(&a, &b)?;
            // Un-permute rows back to the natural observation order.
            let mut vectors = DMatrix::zeros(n, fac.rank());
            for (block_row, &orig) in state.row_order.iter().enumerate() {
                for c in 0..fac.rank() {
                    vectors[(orig, c)] = fac.vectors[(block_row, c)];
                }
            }
            Ok(SigmaFactor::LowRank { n, vectors, values: fac.values })
        }
    }
}

/// The equivalent Gaussian-process prior covariance psi H^2, documenting the
/// reparameterisation psi lambda^2 -> lambda-tilde. The kernel scale enters
/// squared, so a joint sign flip of the scales leaves this unchanged.
pub fn to_gpr_kernel(model: &LoadedModel, param: &ParamVector) -> Result<DMatrix<f64>> {
    let h = build_h(model, param)?;
    if model.is_nystrom() {
        match sigma_factor_at(model, &h)? {
            SigmaFactor::LowRank { vectors, values, .. } => {
                let scaled = &vectors * DMatrix::from_diagonal(&values.map(|v| v * v));
                Ok(scaled * vectors.transpose() * param.psi)
            }
            SigmaFactor::Dense(_) => unreachable!(),
        }
    } else {
        Ok(&h * &h * param.psi)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DataTable;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cov(name: &str) -> CovariateSpec {
        CovariateSpec { name: name.into(), kernel: None, role: Role::Auto }
    }

    fn cov_kern(name: &str, kernel: KernelSpec) -> CovariateSpec {
        CovariateSpec { name: name.into(), kernel: Some(kernel), role: Role::Auto }
    }

    fn toy_table(n: usize, seed: u64) -> DataTable {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = DataTable::new();
        let x1: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let labels: Vec<String> = (0..n).map(|i| format!("g{}", i % 3)).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        t.push_column("y", DataColumn::Numeric(y)).unwrap();
        t.push_column("x1", DataColumn::Numeric(x1)).unwrap();
        t.push_column("grp", DataColumn::Categorical(labels)).unwrap();
        t
    }

    fn two_cov_spec() -> ModelSpec {
        ModelSpec {
            response: "y".into(),
            covariates: vec![cov("x1"), cov("grp")],
            interactions: vec![(0, 1)],
            flags: EstimationFlags::default(),
            lambda0: None,
            psi0: None,
            nystrom: NystromOption::Off,
            nys_seed: None,
        }
    }

    #[test]
    fn load_two_covariates_with_interaction() {
        let table = toy_table(12, 1);
        let model = load_model(&two_cov_spec(), &table).unwrap();
        assert_eq!(model.n_terms(), 3);
        assert_eq!(model.hyperparameter_names(), vec!["lambda[1]", "lambda[2]", "psi"]);
        assert!(matches!(model.kernels[1], KernelSpec::Pearson));
        assert!((model.y_centred.sum()).abs() < 1e-12);
    }

    #[test]
    fn single_covariate_uses_log_lambda() {
        let table = toy_table(10, 2);
        let spec = ModelSpec {
            response: "y".into(),
            covariates: vec![cov("x1")],
            interactions: vec![],
            flags: EstimationFlags::default(),
            lambda0: None,
            psi0: None,
            nystrom: NystromOption::Off,
            nys_seed: None,
        };
        let model = load_model(&spec, &table).unwrap();
        assert_eq!(model.check_theta(), "log(lambda), log(psi)");
        assert_eq!(model.layout.len(), 2);
    }

    #[test]
    fn fbm_with_estimated_hurst_layout() {
        let table = toy_table(10, 3);
        let spec = ModelSpec {
            response: "y".into(),
            covariates: vec![cov_kern("x1", KernelSpec::Fbm { gamma: 0.5 }), cov("grp")],
            interactions: vec![],
            flags: EstimationFlags { est_hurst: true, ..Default::default() },
            lambda0: None,
            psi0: None,
            nystrom: NystromOption::Off,
            nys_seed: None,
        };
        let model = load_model(&spec, &table).unwrap();
        assert_eq!(
            model.hyperparameter_names(),
            vec!["lambda[1]", "lambda[2]", "hurst[1]", "psi"]
        );
        assert_eq!(model.check_theta(), "lambda[1], lambda[2], qnorm(hurst[1]), log(psi)");
    }

    #[test]
    fn hurst_on_second_covariate_names_match() {
        let table = toy_table(10, 4);
        let spec = ModelSpec {
            response: "y".into(),
            covariates: vec![cov("grp"), cov_kern("x1", KernelSpec::Fbm { gamma: 0.5 })],
            interactions: vec![],
            flags: EstimationFlags { est_hurst: true, ..Default::default() },
            lambda0: None,
            psi0: None,
            nystrom: NystromOption::Off,
            nys_seed: None,
        };
        let model = load_model(&spec, &table).unwrap();
        assert_eq!(model.check_theta(), "lambda[1], lambda[2], qnorm(hurst[2]), log(psi)");
    }

    #[test]
    fn all_fixed_layout_is_empty() {
        let table = toy_table(8, 5);
        let mut spec = two_cov_spec();
        spec.flags.fixed_hyp = Some(true);
        let model = load_model(&spec, &table).unwrap();
        assert_eq!(model.check_theta(), "");
        assert!(model.layout.is_empty());
    }

    #[test]
    fn pearson_on_continuous_requires_coercion() {
        let table = toy_table(8, 6);
        let spec = ModelSpec {
            response: "y".into(),
            covariates: vec![cov_kern("x1", KernelSpec::Pearson)],
            interactions: vec![],
            flags: EstimationFlags::default(),
            lambda0: None,
            psi0: None,
            nystrom: NystromOption::Off,
            nys_seed: None,
        };
        assert!(load_model(&spec, &table).is_err());
        let spec_coerced = ModelSpec {
            covariates: vec![CovariateSpec {
                name: "x1".into(),
                kernel: Some(KernelSpec::Pearson),
                role: Role::Categorical,
            }],
            ..spec
        };
        assert!(load_model(&spec_coerced, &table).is_ok());
    }

    #[test]
    fn load_errors() {
        let table = toy_table(8, 7);
        let mut spec = two_cov_spec();
        spec.response = "missing".into();
        assert!(matches!(load_model(&spec, &table), Err(Error::UnknownColumn(_))));

        let mut spec = two_cov_spec();
        spec.response = "grp".into();
        assert!(matches!(load_model(&spec, &table), Err(Error::NonNumeric(_))));

        let mut spec = two_cov_spec();
        spec.interactions = vec![(0, 0)];
        assert!(load_model(&spec, &table).is_err());

        let mut spec = two_cov_spec();
        spec.interactions = vec![(0, 5)];
        assert!(load_model(&spec, &table).is_err());

        let mut spec = two_cov_spec();
        spec.nystrom = NystromOption::Size(8);
        assert!(load_model(&spec, &table).is_err());
    }

    #[test]
    fn interaction_string_parsing() {
        assert_eq!(ModelSpec::parse_interaction("1:2").unwrap(), (0, 1));
        assert_eq!(ModelSpec::parse_interaction(" 3 : 1 ").unwrap(), (2, 0));
        assert!(ModelSpec::parse_interaction("0:1").is_err());
        assert!(ModelSpec::parse_interaction("a:b").is_err());
        assert!(ModelSpec::parse_interaction("1").is_err());
    }

    #[test]
    fn build_h_single_term_and_zero_lambda() {
        let table = toy_table(9, 8);
        let spec = ModelSpec {
            response: "y".into(),
            covariates: vec![cov("x1")],
            interactions: vec![],
            flags: EstimationFlags::default(),
            lambda0: None,
            psi0: None,
            nystrom: NystromOption::Off,
            nys_seed: None,
        };
        let model = load_model(&spec, &table).unwrap();
        let p1 = ParamVector { lambda: vec![1.0], kernel_params: vec![None], psi: 1.0 };
        let h = build_h(&model, &p1).unwrap();
        assert_eq!(h, model.grams.cov[0]);
        let p0 = ParamVector { lambda: vec![0.0], kernel_params: vec![None], psi: 1.0 };
        let h0 = build_h(&model, &p0).unwrap();
        assert!(h0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn build_h_matches_pointwise_kernel_sum() {
        let table = toy_table(10, 9);
        let model = load_model(&two_cov_spec(), &table).unwrap();
        let lam = [0.7, -1.3];
        let param = ParamVector { lambda: lam.to_vec(), kernel_params: vec![None, None], psi: 1.0 };
        let h = build_h(&model, &param).unwrap();
        let want = &model.grams.cov[0] * lam[0]
            + &model.grams.cov[1] * lam[1]
            + model.grams.cov[0].component_mul(&model.grams.cov[1]) * (lam[0] * lam[1]);
        assert!((h - want).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn build_h_linear_in_each_lambda() {
        // Second difference in one lambda is zero when no interaction
        // involves that covariate twice.
        let table = toy_table(10, 10);
        let model = load_model(&two_cov_spec(), &table).unwrap();
        let at = |l1: f64| {
            let param =
                ParamVector { lambda: vec![l1, 0.9], kernel_params: vec![None, None], psi: 1.0 };
            build_h(&model, &param).unwrap()
        };
        let second_diff = at(1.5) - at(1.0) * 2.0 + at(0.5);
        let scale = crate::linalg::max_abs(&at(1.5)).max(1.0);
        assert!(crate::linalg::max_abs(&second_diff) <= 1e-10 * scale);
    }

    #[test]
    fn gpr_kernel_sign_flip_invariant() {
        // The scales enter the likelihood squared, so flipping every lambda
        // leaves psi H^2 unchanged. This holds for additive models; a
        // pairwise interaction carries the product lambda_a lambda_b, which
        // does not flip, so the invariance is asserted interaction-free.
        let table = toy_table(9, 11);
        let mut spec = two_cov_spec();
        spec.interactions.clear();
        let model = load_model(&spec, &table).unwrap();
        let p = ParamVector { lambda: vec![1.2, -0.4], kernel_params: vec![None, None], psi: 0.8 };
        let flipped =
            ParamVector { lambda: vec![-1.2, 0.4], kernel_params: vec![None, None], psi: 0.8 };
        let a = to_gpr_kernel(&model, &p).unwrap();
        let b = to_gpr_kernel(&model, &flipped).unwrap();
        let scale = crate::linalg::max_abs(&a).max(1.0);
        assert!((a.clone() - b).iter().all(|v| v.abs() < 1e-9 * scale));
        // psi build_h^2 by direct multiplication.
        let h = build_h(&model, &p).unwrap();
        let want = &h * &h * p.psi;
        assert!((a - want).iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn reload_is_bit_identical() {
        let table = toy_table(14, 12);
        let mut spec = two_cov_spec();
        spec.nystrom = NystromOption::Size(5);
        spec.nys_seed = Some(42);
        let m1 = load_model(&spec, &table).unwrap();
        let m2 = load_model(&spec, &table).unwrap();
        assert_eq!(m1.grams, m2.grams);
        assert_eq!(m1.nystrom, m2.nystrom);
        // Gram rows are the active rows of the dense centred Gram.
        let dense = load_model(&two_cov_spec(), &table).unwrap();
        let act = &m1.nystrom.as_ref().unwrap().active;
        for (r, &i) in act.iter().enumerate() {
            for j in 0..14 {
                assert!(
                    (m1.grams.cov[0][(r, j)] - dense.grams.cov[0][(i, j)]).abs() < 1e-12,
                    "nystrom rows must match dense centred Gram rows"
                );
            }
        }
    }

    #[test]
    fn theta_examples() {
        let table = toy_table(10, 13);
        let model = load_model(&two_cov_spec(), &table).unwrap();
        // psi = 1 -> log psi = 0; identity lambdas pass through.
        let param =
            ParamVector { lambda: vec![2.0, -3.0], kernel_params: vec![None, None], psi: 1.0 };
        let theta = param_to_theta(&model.layout, &param).unwrap();
        assert_eq!(theta[0], 2.0);
        assert_eq!(theta[1], -3.0);
        assert_eq!(theta[2], 0.0);
        let back = theta_to_param(&model.layout, &theta).unwrap();
        assert_eq!(back, param);
    }

    #[test]
    fn probit_transform_of_half_is_zero() {
        let t = Transform::Probit;
        assert!(t.to_theta(0.5).unwrap().abs() < 1e-14);
        assert!(t.to_theta(0.0).is_err());
        assert!(Transform::Log.to_theta(-1.0).is_err());
    }

    proptest! {
        #[test]
        fn transform_round_trip(
            lam1 in -4.0f64..4.0,
            lam2 in -4.0f64..4.0,
            gamma in 0.02f64..0.98,
            psi in 0.01f64..20.0,
        ) {
            let table = toy_table(10, 21);
            let spec = ModelSpec {
                response: "y".into(),
                covariates: vec![
                    cov_kern("x1", KernelSpec::Fbm { gamma: 0.5 }),
                    cov("grp"),
                ],
                interactions: vec![],
                flags: EstimationFlags { est_hurst: true, ..Default::default() },
                lambda0: None,
                psi0: None,
                nystrom: NystromOption::Off,
                nys_seed: None,
            };
            let model = load_model(&spec, &table).unwrap();
            let param = ParamVector {
                lambda: vec![lam1, lam2],
                kernel_params: vec![Some(gamma), None],
                psi,
            };
            let theta = param_to_theta(&model.layout, &param).unwrap();
            let back = theta_to_param(&model.layout, &theta).unwrap();
            prop_assert!((back.lambda[0] - lam1).abs() < 1e-12);
            prop_assert!((back.lambda[1] - lam2).abs() < 1e-12);
            prop_assert!((back.kernel_params[0].unwrap() - gamma).abs() < 1e-12);
            prop_assert!((back.psi - psi).abs() < 1e-12 * psi);
        }
    }

    #[test]
    fn nystrom_auto_size() {
        let table = toy_table(35, 22);
        let mut spec = two_cov_spec();
        spec.nystrom = NystromOption::Auto;
        let model = load_model(&spec, &table).unwrap();
        assert_eq!(model.nystrom.as_ref().unwrap().m, 4); // ceil(3.5)
        assert_eq!(model.grams.cov[0].nrows(), 4);
        assert_eq!(model.grams.cov[0].ncols(), 35);
        assert_eq!(model.available_methods(), "direct (Nystrom), fixed (Nystrom)");
    }

    #[test]
    fn grams_at_recomputes_for_new_kernel_params() {
        let table = toy_table(10, 23);
        let spec = ModelSpec {
            response: "y".into(),
            covariates: vec![cov_kern("x1", KernelSpec::Fbm { gamma: 0.5 })],
            interactions: vec![],
            flags: EstimationFlags { est_hurst: true, ..Default::default() },
            lambda0: None,
            psi0: None,
            nystrom: NystromOption::Off,
            nys_seed: None,
        };
        let model = load_model(&spec, &table).unwrap();
        let p_base = ParamVector { lambda: vec![1.0], kernel_params: vec![Some(0.5)], psi: 1.0 };
        assert!(matches!(model.grams_at(&p_base).unwrap(), Cow::Borrowed(_)));
        let p_new = ParamVector { lambda: vec![1.0], kernel_params: vec![Some(0.7)], psi: 1.0 };
        let g = model.grams_at(&p_new).unwrap();
        assert!(matches!(g, Cow::Owned(_)));
        let direct = crate::kernels::kern_fbm(&model.covariates[0], None, 0.7, true).unwrap();
        assert_eq!(g.cov[0], direct.values);
    }
}
