//! Synthetic data generation: a smooth-regression benchmark generator and
//! prior sample paths.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::kernels::{kern_for_spec, CovariateColumn, KernelSpec};
use crate::stats::normal_pdf;

/// Configuration for [`gen_smooth`].
#[derive(Clone, Debug)]
pub struct SimConfig {
    pub n: usize,
    pub xlim: (f64, f64),
    pub seed: u64,
    /// Constant offset of the mean function.
    pub const_offset: f64,
    pub noise_sd: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig { n: 150, xlim: (-1.0, 5.5), seed: 1, const_offset: 1.0, noise_sd: 0.9 }
    }
}

impl SimConfig {
    fn validate(&self) -> Result<()> {
        if self.n < 1 {
            return Err(Error::InvalidParam("n must be at least 1".into()));
        }
        if !(self.xlim.0 < self.xlim.1) {
            return Err(Error::InvalidParam("xlim must satisfy lo < hi".into()));
        }
        if !(self.noise_sd >= 0.0) {
            return Err(Error::InvalidParam("noise sd must be non-negative".into()));
        }
        Ok(())
    }
}

/// The noiseless mean: const + 0.35 phi(x; 1, 0.8^2) + 0.65 phi(x; 4, 1.5^2)
/// + 1[x > 4.5] exp(1.25 (x - 4.5)).
pub fn smooth_mean(x: f64, const_offset: f64) -> f64 {
    let mut m = const_offset
        + 0.35 * normal_pdf(x, 1.0, 0.8)
        + 0.65 * normal_pdf(x, 4.0, 1.5);
    if x > 4.5 {
        m += (1.25 * (x - 4.5)).exp();
    }
    m
}

/// Draw (X, y) from the smooth benchmark regression: X uniform on the range
/// with a small jitter of half the average grid spacing, Gaussian noise on
/// y. Deterministic given the seed.
pub fn gen_smooth(cfg: &SimConfig) -> Result<(DVector<f64>, DVector<f64>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (lo, hi) = cfg.xlim;
    let jitter = (hi - lo) / (2.0 * cfg.n as f64);
    let mut xs: Vec<f64> = (0..cfg.n)
        .map(|_| rng.random_range(lo..hi) + rng.random_range(-jitter..jitter))
        .collect();
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let ys: Vec<f64> = xs
        .iter()
        .map(|&x| {
            let eps: f64 = rng.sample::<f64, _>(StandardNormal) * cfg.noise_sd;
            smooth_mean(x, cfg.const_offset) + eps
        })
        .collect();
    Ok((DVector::from_vec(xs), DVector::from_vec(ys)))
}

/// Sample a function path f(x) = sum_i h(x, x_i) w_i over the grid, with
/// w_i ~ N(0, psi) independent and h the centred kernel. The sampled values
/// have covariance psi H^2.
pub fn sample_iprior_path(
    kernel: &KernelSpec,
    xs: &[f64],
    psi: f64,
    seed: u64,
) -> Result<DVector<f64>> {
    if xs.is_empty() {
        return Err(Error::InvalidParam("empty grid".into()));
    }
    if !(psi > 0.0) {
        return Err(Error::InvalidParam("psi must be positive".into()));
    }
    let col = CovariateColumn::Continuous(DMatrix::from_column_slice(xs.len(), 1, xs));
    let gram = match kernel {
        KernelSpec::Pearson => {
            return Err(Error::KernelInput("pearson paths need categorical grids".into()))
        }
        k => kern_for_spec(k, &col, None, 1.0, true)?,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sd = psi.sqrt();
    let w = DVector::from_fn(xs.len(), |_, _| rng.sample::<f64, _>(StandardNormal) * sd);
    Ok(&gram.values * w)
}
