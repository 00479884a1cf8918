//! Persisted fit artifacts: a versioned JSON document carrying everything
//! needed to reproduce predictions — the model spec, the estimated
//! hyperparameters, the training columns (the Grams themselves are
//! recomputed on load), and the fit diagnostics.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{DataColumn, DataTable};
use crate::error::{Error, Result};
use crate::estimation::{self, FitResult, SeOutcome};
use crate::kernels::{CentringStats, CovariateColumn};
use crate::model::{load_model, ModelSpec, ParamVector};

pub const ARTIFACT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum StoredColumn {
    Numeric(Vec<f64>),
    Categorical(Vec<String>),
    Matrix { nrows: usize, ncols: usize, data: Vec<f64> },
}

impl StoredColumn {
    fn to_data(&self) -> DataColumn {
        match self {
            StoredColumn::Numeric(v) => DataColumn::Numeric(v.clone()),
            StoredColumn::Categorical(v) => DataColumn::Categorical(v.clone()),
            StoredColumn::Matrix { nrows, ncols, data } => {
                DataColumn::Matrix(DMatrix::from_iterator(*nrows, *ncols, data.iter().copied()))
            }
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StoredTable {
    pub names: Vec<String>,
    pub columns: Vec<StoredColumn>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StoredSe {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
    pub z: f64,
    pub p_value: f64,
}

/// Versioned, reproducible record of a fitted model.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FitArtifact {
    pub version: u32,
    pub spec: ModelSpec,
    pub method: String,
    pub theta_hat: Vec<f64>,
    pub param_hat: ParamVector,
    pub log_lik: f64,
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub convergence: String,
    pub message: String,
    pub y_mean: f64,
    pub se: Option<Vec<StoredSe>>,
    pub se_message: Option<String>,
    pub centring: Vec<CentringStats>,
    /// FNV-1a hash of the training CSV bytes, when fitted from a file.
    pub data_hash: Option<String>,
    pub w_mean: Vec<f64>,
    /// Training columns needed to rebuild cross-kernels (response first).
    pub training: StoredTable,
}

/// FNV-1a over raw bytes; stable fingerprint for the training file.
pub fn fnv1a_hex(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

impl FitArtifact {
    pub fn from_fit(fit: &FitResult, data_hash: Option<String>) -> FitArtifact {
        let model = &fit.model;
        let (se, se_message) = match &fit.se {
            Some(SeOutcome::Available(entries)) => (
                Some(
                    entries
                        .iter()
                        .map(|e| StoredSe {
                            name: e.name.clone(),
                            estimate: e.estimate,
                            se: e.se,
                            z: e.z,
                            p_value: e.p_value,
                        })
                        .collect(),
                ),
                None,
            ),
            Some(SeOutcome::Unavailable(msg)) => (None, Some(msg.clone())),
            None => (None, None),
        };
        let mut names = vec![model.spec.response.clone()];
        let mut columns = vec![StoredColumn::Numeric(model.y.as_slice().to_vec())];
        for (cspec, col) in model.spec.covariates.iter().zip(&model.covariates) {
            names.push(cspec.name.clone());
            columns.push(match col {
                CovariateColumn::Continuous(m) if m.ncols() == 1 => {
                    StoredColumn::Numeric(m.column(0).iter().copied().collect())
                }
                CovariateColumn::Continuous(m) => StoredColumn::Matrix {
                    nrows: m.nrows(),
                    ncols: m.ncols(),
                    data: m.iter().copied().collect(),
                },
                CovariateColumn::Functional(m) => StoredColumn::Matrix {
                    nrows: m.nrows(),
                    ncols: m.ncols(),
                    data: m.iter().copied().collect(),
                },
                CovariateColumn::Categorical(c) => StoredColumn::Categorical(
                    c.codes.iter().map(|&i| c.levels[i].clone()).collect(),
                ),
            });
        }
        FitArtifact {
            version: ARTIFACT_VERSION,
            spec: model.spec.clone(),
            method: fit.method.name().to_string(),
            theta_hat: fit.theta_hat.iter().copied().collect(),
            param_hat: fit.param_hat.clone(),
            log_lik: fit.log_lik,
            trace: fit.trace.clone(),
            iterations: fit.iterations,
            convergence: fit.status.label().to_string(),
            message: fit.message.clone(),
            y_mean: model.y_mean,
            se,
            se_message,
            centring: model.grams.stats.clone(),
            data_hash,
            w_mean: fit.w_mean.iter().copied().collect(),
            training: StoredTable { names, columns },
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::Data(format!("artifact serialisation: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<FitArtifact> {
        let artifact: FitArtifact =
            serde_json::from_str(text).map_err(|e| Error::Parse(format!("artifact: {e}")))?;
        if artifact.version != ARTIFACT_VERSION {
            return Err(Error::Data(format!(
                "unsupported artifact version {} (this build reads version {ARTIFACT_VERSION})",
                artifact.version
            )));
        }
        Ok(artifact)
    }

    pub fn load(path: &Path) -> Result<FitArtifact> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    fn training_table(&self) -> Result<DataTable> {
        let mut table = DataTable::new();
        for (name, col) in self.training.names.iter().zip(&self.training.columns) {
            table.push_column(name.clone(), col.to_data())?;
        }
        Ok(table)
    }

    /// Rebuild the loaded model from the stored training columns (Grams are
    /// recomputed, bit-identically given the stored spec and seed) and
    /// re-evaluate the posterior at the stored theta.
    pub fn rebuild(&self) -> Result<FitResult> {
        let table = rewrap_functionals(&self.spec, self.training_table()?)?;
        let model = std::sync::Arc::new(load_model(&self.spec, &table)?);
        let theta = DVector::from_vec(self.theta_hat.clone());
        estimation::fit_fixed(&model, &theta)
    }
}

/// Functional covariates were flattened to one matrix column on save; give
/// the loader a prefix-gatherable layout by splitting the matrix back into
/// per-grid-point columns named `<prefix>_t<j>`.
fn rewrap_functionals(spec: &ModelSpec, table: DataTable) -> Result<DataTable> {
    let functional: Vec<&str> = spec
        .covariates
        .iter()
        .filter(|c| c.role == crate::model::Role::Functional)
        .map(|c| c.name.as_str())
        .collect();
    if functional.is_empty() {
        return Ok(table);
    }
    let mut out = DataTable::new();
    for name in table.names().to_vec() {
        let col = table.column(&name).expect("iterating own names").clone();
        if functional.contains(&name.as_str()) {
            match col {
                DataColumn::Matrix(m) => {
                    for j in 0..m.ncols() {
                        out.push_column(
                            format!("{name}_t{j}"),
                            DataColumn::Numeric(m.column(j).iter().copied().collect()),
                        )?;
                    }
                }
                _ => return Err(Error::Data(format!("stored functional `{name}` is not a matrix"))),
            }
        } else {
            out.push_column(name, col)?;
        }
    }
    Ok(out)
}
