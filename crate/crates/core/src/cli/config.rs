//! Model-spec configuration: a TOML document with one section per
//! covariate, plus estimation flags and Nystrom options.
//!
//! ```toml
//! response = "circ"
//! interactions = ["1:2"]
//!
//! [[covariate]]
//! name = "age"
//! kernel = "linear"
//!
//! [[covariate]]
//! name = "tree"
//! kernel = "pearson"
//! type = "categorical"
//!
//! [options]
//! est_lambda = true
//! est_psi = true
//! nystrom = 35
//! nys_seed = 123
//! ```

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::kernels::KernelSpec;
use crate::model::{CovariateSpec, EstimationFlags, ModelSpec, NystromOption, Role};

/// Parse a kernel spec string: `linear`, `canonical`, `fbm[,gamma]`,
/// `se[,lengthscale]`, `poly[d][,offset]` or `pearson`. A comma separates
/// the kernel parameter value; `poly3,1` is degree 3 with offset 1.
pub fn parse_kernel_string(s: &str) -> Result<KernelSpec> {
    let s = s.trim();
    let (head, value) = match s.split_once(',') {
        Some((h, v)) => {
            let parsed: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::Parse(format!("kernel parameter `{v}` is not a number")))?;
            (h.trim(), Some(parsed))
        }
        None => (s, None),
    };
    let spec = match head.to_ascii_lowercase().as_str() {
        "linear" | "canonical" => {
            if value.is_some() {
                return Err(Error::Parse("the linear kernel takes no parameter".into()));
            }
            KernelSpec::Linear
        }
        "pearson" => {
            if value.is_some() {
                return Err(Error::Parse("the pearson kernel takes no parameter".into()));
            }
            KernelSpec::Pearson
        }
        "fbm" => KernelSpec::Fbm { gamma: value.unwrap_or(KernelSpec::DEFAULT_HURST) },
        "se" => KernelSpec::Se { lengthscale: value.unwrap_or(KernelSpec::DEFAULT_LENGTHSCALE) },
        other if other.starts_with("poly") => {
            let degree = if other == "poly" {
                KernelSpec::DEFAULT_DEGREE
            } else {
                other[4..]
                    .parse::<u32>()
                    .map_err(|_| Error::Parse(format!("bad polynomial degree in `{s}`")))?
            };
            KernelSpec::Poly { degree, offset: value.unwrap_or(KernelSpec::DEFAULT_OFFSET) }
        }
        other => return Err(Error::Parse(format!("unknown kernel `{other}`"))),
    };
    spec.validate()?;
    Ok(spec)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    response: String,
    #[serde(default)]
    interactions: Vec<String>,
    #[serde(default)]
    covariate: Vec<CovariateConfig>,
    #[serde(default)]
    options: OptionsConfig,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CovariateConfig {
    name: String,
    #[serde(default)]
    kernel: Option<String>,
    #[serde(default, rename = "type")]
    role: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptionsConfig {
    est_lambda: Option<bool>,
    est_hurst: Option<bool>,
    est_lengthscale: Option<bool>,
    est_offset: Option<bool>,
    est_psi: Option<bool>,
    fixed_hyp: Option<bool>,
    lambda: Option<Vec<f64>>,
    psi: Option<f64>,
    nystrom: Option<toml::Value>,
    nys_seed: Option<u64>,
}

fn parse_role(s: &str) -> Result<Role> {
    match s.to_ascii_lowercase().as_str() {
        "auto" => Ok(Role::Auto),
        "categorical" | "factor" => Ok(Role::Categorical),
        "functional" => Ok(Role::Functional),
        other => Err(Error::Parse(format!(
            "unknown covariate type `{other}` (expected auto, categorical or functional)"
        ))),
    }
}

/// Parse a TOML model configuration into a [`ModelSpec`].
pub fn parse_model_config(text: &str) -> Result<ModelSpec> {
    let cfg: ConfigFile =
        toml::from_str(text).map_err(|e| Error::Parse(format!("config: {e}")))?;
    if cfg.covariate.is_empty() {
        return Err(Error::Parse("config declares no covariates".into()));
    }
    let covariates = cfg
        .covariate
        .iter()
        .map(|c| {
            let kernel = c.kernel.as_deref().map(parse_kernel_string).transpose()?;
            let role = c.role.as_deref().map(parse_role).transpose()?.unwrap_or_default();
            Ok(CovariateSpec { name: c.name.clone(), kernel, role })
        })
        .collect::<Result<Vec<_>>>()?;
    let interactions = cfg
        .interactions
        .iter()
        .map(|s| ModelSpec::parse_interaction(s))
        .collect::<Result<Vec<_>>>()?;

    let defaults = EstimationFlags::default();
    let o = &cfg.options;
    let flags = EstimationFlags {
        est_lambda: o.est_lambda.unwrap_or(defaults.est_lambda),
        est_hurst: o.est_hurst.unwrap_or(defaults.est_hurst),
        est_lengthscale: o.est_lengthscale.unwrap_or(defaults.est_lengthscale),
        est_offset: o.est_offset.unwrap_or(defaults.est_offset),
        est_psi: o.est_psi.unwrap_or(defaults.est_psi),
        fixed_hyp: o.fixed_hyp,
    };
    let nystrom = match &o.nystrom {
        None => NystromOption::Off,
        Some(toml::Value::Boolean(b)) => if *b { NystromOption::Auto } else { NystromOption::Off },
        Some(toml::Value::Integer(m)) if *m >= 0 => NystromOption::Size(*m as usize),
        Some(v) => {
            return Err(Error::Parse(format!(
                "nystrom must be a boolean or an integer, got {v}"
            )))
        }
    };
    Ok(ModelSpec {
        response: cfg.response,
        covariates,
        interactions,
        flags,
        lambda0: o.lambda.clone(),
        psi0: o.psi,
        nystrom,
        nys_seed: o.nys_seed,
    })
}
