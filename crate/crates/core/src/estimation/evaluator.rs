//! Memoised log-likelihood and gradient evaluation.
//!
//! The marginal log-likelihood is
//!   log L = -(n/2) log 2pi - 1/2 log det Sigma - 1/2 y~' Sigma^-1 y~
//! with Sigma = psi H^2 + psi^-1 I. Evaluation goes through the spectral
//! factor of H; the gradient uses
//!   d log L / d t = -1/2 tr(Sigma^-1 dSigma) + 1/2 y~' Sigma^-1 dSigma Sigma^-1 y~
//! with dSigma/dlambda = psi (H G + G H), G = dH/dlambda, chain-ruled
//! through the unconstrained transforms. Scale derivatives of H are exact;
//! kernel-parameter derivatives (Hurst, lengthscale, offset) are central
//! finite differences on the Gram.
//!
//! Two structural shortcuts are detected at construction: models whose H is
//! constant in theta (only psi estimated), and single-term models where H is
//! a pure scaling of a fixed Gram. Both reuse one spectral factorisation for
//! every evaluation.

use std::cell::RefCell;
use std::f64::consts::PI;
use std::rc::Rc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kernels::KernelSpec;
use crate::linalg::SigmaFactor;
use crate::model::{
    build_h_with, scaled_term, sigma_factor_at, theta_to_param, LoadedModel, ParamVector,
    SlotKind, TermGrams,
};

pub(crate) fn ln_2pi() -> f64 {
    (2.0 * PI).ln()
}

/// Elementwise sum of products; for symmetric A, B, W this equals
/// tr(A B W) when one argument is pre-multiplied by W.
pub(crate) fn sumprod(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    debug_assert_eq!(a.shape(), b.shape());
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        s += x * y;
    }
    s
}

fn theta_bits(theta: &DVector<f64>) -> Vec<u64> {
    theta.iter().map(|v| v.to_bits()).collect()
}

fn kparam_bits(param: &ParamVector) -> Vec<u64> {
    param.kernel_params.iter().map(|p| p.map_or(u64::MAX, f64::to_bits)).collect()
}

pub(crate) struct EvalState {
    pub theta_bits: Vec<u64>,
    pub param: ParamVector,
    pub grams: Option<Rc<TermGrams>>,
    pub factor: SigmaFactor,
    pub loglik: f64,
}

enum FastScale {
    /// H is independent of theta (psi-only estimation).
    Constant,
    /// H = lambda_0 * H_base (single non-polynomial term).
    Lambda,
}

struct FastPath {
    scale: FastScale,
    base: SigmaFactor,
    /// Projection of the centred response onto the base eigenvectors.
    y_proj: DVector<f64>,
    /// Squared norm of the response component outside the factor's column
    /// space (zero on the dense path).
    resid_sq: f64,
}

pub(crate) struct Evaluator<'m> {
    pub model: &'m LoadedModel,
    gram_memo: RefCell<Option<(Vec<u64>, Rc<TermGrams>)>>,
    state_memo: RefCell<Option<Rc<EvalState>>>,
    fast: Option<FastPath>,
}

impl<'m> Evaluator<'m> {
    pub fn new(model: &'m LoadedModel) -> Result<Evaluator<'m>> {
        let mut ev = Evaluator {
            model,
            gram_memo: RefCell::new(None),
            state_memo: RefCell::new(None),
            fast: None,
        };
        ev.fast = ev.detect_fast_path()?;
        Ok(ev)
    }

    /// Build without the structural shortcuts (used by tests to cross-check
    /// the fast path against the general path).
    #[cfg(test)]
    pub fn new_general(model: &'m LoadedModel) -> Evaluator<'m> {
        Evaluator {
            model,
            gram_memo: RefCell::new(None),
            state_memo: RefCell::new(None),
            fast: None,
        }
    }

    fn detect_fast_path(&self) -> Result<Option<FastPath>> {
        let model = self.model;
        let slots = &model.layout.slots;
        let any_kparam = slots.iter().any(|s| matches!(s.kind, SlotKind::KernelParam(_)));
        if any_kparam {
            return Ok(None);
        }
        let any_lambda = slots.iter().any(|s| matches!(s.kind, SlotKind::Lambda(_)));
        let single_plain_term = model.kernels.len() == 1
            && model.spec.interactions.is_empty()
            && !model.kernels[0].is_poly();
        let scale = if !any_lambda {
            FastScale::Constant
        } else if single_plain_term {
            FastScale::Lambda
        } else {
            return Ok(None);
        };
        let h_base = match scale {
            FastScale::Constant => build_h_with(model, &model.grams, &model.layout.base),
            FastScale::Lambda => model.grams.cov[0].clone(),
        };
        let base = sigma_factor_at(model, &h_base)?;
        let (y_proj, resid_sq) = match &base {
            SigmaFactor::Dense(f) => (f.vectors.transpose() * &model.y_centred, 0.0),
            SigmaFactor::LowRank { vectors, .. } => {
                let proj = vectors.transpose() * &model.y_centred;
                let resid = &model.y_centred - vectors * &proj;
                (proj, resid.norm_squared())
            }
        };
        Ok(Some(FastPath { scale, base, y_proj, resid_sq }))
    }

    pub fn has_fast_path(&self) -> bool {
        self.fast.is_some()
    }

    /// Eigen data of the fast path: (eigenvalues of H_base, projected
    /// response, residual norm^2, total n). Used by the EM fast loop.
    pub(crate) fn fast_parts(&self) -> Option<(&DVector<f64>, &DVector<f64>, f64, bool)> {
        self.fast.as_ref().map(|f| {
            let values = match &f.base {
                SigmaFactor::Dense(e) => &e.values,
                SigmaFactor::LowRank { values, .. } => values,
            };
            (values, &f.y_proj, f.resid_sq, matches!(f.scale, FastScale::Lambda))
        })
    }

    pub fn grams_at(&self, param: &ParamVector) -> Result<Rc<TermGrams>> {
        let key = kparam_bits(param);
        if let Some((k, g)) = self.gram_memo.borrow().as_ref() {
            if *k == key {
                return Ok(Rc::clone(g));
            }
        }
        let grams = Rc::new(self.model.grams_at(param)?.into_owned());
        *self.gram_memo.borrow_mut() = Some((key, Rc::clone(&grams)));
        Ok(grams)
    }

    fn fast_loglik(&self, fast: &FastPath, param: &ParamVector) -> f64 {
        let n = self.model.n as f64;
        let psi = param.psi;
        let s = match fast.scale {
            FastScale::Constant => 1.0,
            FastScale::Lambda => param.lambda[0],
        };
        let values = match &fast.base {
            SigmaFactor::Dense(e) => &e.values,
            SigmaFactor::LowRank { values, .. } => values,
        };
        let r = values.len();
        let mut logdet = -(n - r as f64) * psi.ln();
        let mut quad = psi * fast.resid_sq;
        for i in 0..r {
            let u = s * values[i];
            let d = psi * u * u + 1.0 / psi;
            logdet += d.ln();
            quad += fast.y_proj[i] * fast.y_proj[i] / d;
        }
        -0.5 * n * ln_2pi() - 0.5 * logdet - 0.5 * quad
    }

    fn fast_grad(&self, fast: &FastPath, param: &ParamVector, theta: &DVector<f64>) -> DVector<f64> {
        let n = self.model.n as f64;
        let psi = param.psi;
        let s = match fast.scale {
            FastScale::Constant => 1.0,
            FastScale::Lambda => param.lambda[0],
        };
        let values = match &fast.base {
            SigmaFactor::Dense(e) => &e.values,
            SigmaFactor::LowRank { values, .. } => values,
        };
        let r = values.len();
        let mut d_lambda = 0.0;
        let mut d_psi = 0.0;
        for i in 0..r {
            let u0 = values[i];
            let u = s * u0;
            let d = psi * u * u + 1.0 / psi;
            let y2 = fast.y_proj[i] * fast.y_proj[i];
            // d d_i / d lambda and / d psi.
            let dd_dl = 2.0 * psi * s * u0 * u0;
            let dd_dpsi = u * u - 1.0 / (psi * psi);
            d_lambda += -0.5 * dd_dl / d + 0.5 * y2 * dd_dl / (d * d);
            d_psi += -0.5 * dd_dpsi / d + 0.5 * y2 * dd_dpsi / (d * d);
        }
        // Null-space contributions: logdet has (n - r) log(1/psi), the
        // quadratic form has psi * resid_sq.
        d_psi += 0.5 * (n - r as f64) / psi - 0.5 * fast.resid_sq;
        let mut grad = DVector::zeros(self.model.layout.len());
        for (j, slot) in self.model.layout.slots.iter().enumerate() {
            let g_nat = match slot.kind {
                SlotKind::Lambda(_) => d_lambda,
                SlotKind::Psi => d_psi,
                SlotKind::KernelParam(_) => unreachable!("fast path excludes kernel params"),
            };
            grad[j] = g_nat * slot.transform.dnatural_dtheta(theta[j]);
        }
        grad
    }

    /// Log-likelihood at theta, memoising the full evaluation state.
    pub fn loglik(&self, theta: &DVector<f64>) -> Result<f64> {
        Ok(self.state_at(theta)?.loglik)
    }

    pub fn state_at(&self, theta: &DVector<f64>) -> Result<Rc<EvalState>> {
        let bits = theta_bits(theta);
        if let Some(state) = self.state_memo.borrow().as_ref() {
            if state.theta_bits == bits {
                return Ok(Rc::clone(state));
            }
        }
        let param = theta_to_param(&self.model.layout, theta)?;
        if !(param.psi > 0.0) {
            return Err(Error::InvalidParam("psi must be positive".into()));
        }
        let state = if let Some(fast) = &self.fast {
            let ll = self.fast_loglik(fast, &param);
            EvalState {
                theta_bits: bits,
                param,
                grams: None,
                factor: fast.base.clone(),
                loglik: ll,
            }
        } else {
            let grams = self.grams_at(&param)?;
            let h = build_h_with(self.model, &grams, &param);
            let factor = sigma_factor_at(self.model, &h)?;
            let y = &self.model.y_centred;
            let quad = y.dot(&factor.apply_inv(param.psi, y));
            let ll = -0.5 * self.model.n as f64 * ln_2pi()
                - 0.5 * factor.logdet(param.psi)
                - 0.5 * quad;
            EvalState { theta_bits: bits, param, grams: Some(grams), factor, loglik: ll }
        };
        let rc = Rc::new(state);
        *self.state_memo.borrow_mut() = Some(Rc::clone(&rc));
        Ok(rc)
    }

    /// dH/dlambda_k at the given parameters (exact; includes interaction
    /// terms and the polynomial in-power scale).
    pub(crate) fn dh_dlambda(
        &self,
        grams: &TermGrams,
        param: &ParamVector,
        scaled: &[DMatrix<f64>],
        k: usize,
    ) -> DMatrix<f64> {
        let model = self.model;
        let mut g = match model.kernels[k] {
            KernelSpec::Poly { degree, .. } => {
                let c = param.kernel_params[k].unwrap_or(KernelSpec::DEFAULT_OFFSET);
                let lam = param.lambda[k];
                let d = degree as i32;
                grams.cov[k].map(|v| degree as f64 * (lam * v + c).powi(d - 1) * v)
            }
            _ => grams.cov[k].clone(),
        };
        let own_deriv = g.clone();
        for (idx, &(a, b)) in model.spec.interactions.iter().enumerate() {
            if a != k && b != k {
                continue;
            }
            let other = if a == k { b } else { a };
            match (&grams.inter[idx], model.kernels[k].is_poly() || model.kernels[other].is_poly())
            {
                (Some(pre), false) => g += pre * param.lambda[other],
                _ => g += own_deriv.component_mul(&scaled[other]),
            }
        }
        g
    }

    /// dH/d(kernel param of covariate k) by central finite differences on
    /// the scaled term (the Gram is recomputed at the shifted parameter).
    pub(crate) fn dh_dkparam(
        &self,
        grams: &TermGrams,
        param: &ParamVector,
        scaled: &[DMatrix<f64>],
        k: usize,
    ) -> Result<DMatrix<f64>> {
        let model = self.model;
        let p = param.kernel_params[k]
            .ok_or_else(|| Error::InvalidParam("kernel parameter slot without a value".into()))?;
        let mut h = 1e-6 * p.abs().max(1.0);
        match model.kernels[k] {
            KernelSpec::Fbm { .. } => h = h.min(p / 2.0).min((1.0 - p) / 2.0),
            KernelSpec::Se { .. } | KernelSpec::Poly { .. } => {
                if p > 0.0 {
                    h = h.min(p / 2.0);
                }
            }
            _ => {}
        }
        if !(h > 0.0) {
            return Err(Error::Numerical(
                "kernel parameter too close to its boundary for differentiation".into(),
            ));
        }
        let term_at = |val: f64| -> Result<DMatrix<f64>> {
            match model.kernels[k] {
                KernelSpec::Poly { degree, .. } => Ok(crate::kernels::poly_transform(
                    &grams.cov[k],
                    param.lambda[k],
                    val,
                    degree,
                )),
                _ => {
                    let mut shifted = param.clone();
                    shifted.kernel_params[k] = Some(val);
                    let g2 = self.model.grams_at(&shifted)?;
                    Ok(&g2.cov[k] * param.lambda[k])
                }
            }
        };
        let plus = term_at(p + h)?;
        let minus = term_at(p - h)?;
        let dterm = (plus - minus) / (2.0 * h);
        let mut g = dterm.clone();
        for &(a, b) in &model.spec.interactions {
            if a != k && b != k {
                continue;
            }
            let other = if a == k { b } else { a };
            g += dterm.component_mul(&scaled[other]);
        }
        Ok(g)
    }

    /// Log-likelihood and its gradient in theta. Dense models use the exact
    /// trace identities; Nystrom models fall back to central differences of
    /// the approximate log-likelihood.
    pub fn loglik_grad(&self, theta: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let state = self.state_at(theta)?;
        if let Some(fast) = &self.fast {
            let grad = self.fast_grad(fast, &state.param, theta);
            return Ok((state.loglik, grad));
        }
        if self.model.is_nystrom() {
            return self.fd_grad(theta, state.loglik);
        }
        let model = self.model;
        let param = &state.param;
        let psi = param.psi;
        let grams = state.grams.as_ref().expect("general path stores grams");
        let eig = match &state.factor {
            SigmaFactor::Dense(e) => e,
            SigmaFactor::LowRank { .. } => unreachable!("dense path"),
        };
        let n = model.n;
        let u = &eig.values;
        let v = &eig.vectors;
        let d: Vec<f64> = u.iter().map(|&ui| psi * ui * ui + 1.0 / psi).collect();
        let yt = v.transpose() * &model.y_centred;
        // a = Sigma^-1 y~, ha = H a (both via the eigenbasis).
        let mut a_eig = yt.clone();
        let mut ha_eig = yt.clone();
        for i in 0..n {
            a_eig[i] /= d[i];
            ha_eig[i] *= u[i] / d[i];
        }
        let a = v * &a_eig;
        let ha = v * &ha_eig;
        // S = Sigma^-1 H = V diag(u/d) V'.
        let mut vs = v.clone();
        for j in 0..n {
            let w = u[j] / d[j];
            for i in 0..n {
                vs[(i, j)] *= w;
            }
        }
        let s_mat = vs * v.transpose();

        let scaled: Vec<DMatrix<f64>> =
            (0..model.kernels.len()).map(|k| scaled_term(model, grams, k, param)).collect();

        let mut grad = DVector::zeros(model.layout.len());
        for (j, slot) in model.layout.slots.iter().enumerate() {
            let g_nat = match slot.kind {
                SlotKind::Lambda(k) => {
                    let gk = self.dh_dlambda(grams, param, &scaled, k);
                    let ga = &gk * &a;
                    -psi * sumprod(&s_mat, &gk) + psi * ha.dot(&ga)
                }
                SlotKind::KernelParam(k) => {
                    let gk = self.dh_dkparam(grams, param, &scaled, k)?;
                    let ga = &gk * &a;
                    -psi * sumprod(&s_mat, &gk) + psi * ha.dot(&ga)
                }
                SlotKind::Psi => {
                    // dSigma/dpsi = H^2 - psi^-2 I.
                    let mut tr_term = 0.0;
                    for i in 0..n {
                        tr_term += (u[i] * u[i] - 1.0 / (psi * psi)) / d[i];
                    }
                    let quad_term = ha.norm_squared() - a.norm_squared() / (psi * psi);
                    -0.5 * tr_term + 0.5 * quad_term
                }
            };
            grad[j] = g_nat * slot.transform.dnatural_dtheta(theta[j]);
        }
        Ok((state.loglik, grad))
    }

    fn fd_grad(&self, theta: &DVector<f64>, ll0: f64) -> Result<(f64, DVector<f64>)> {
        let mut grad = DVector::zeros(theta.len());
        for j in 0..theta.len() {
            let h = 1e-6 * theta[j].abs().max(1.0);
            let mut tp = theta.clone();
            tp[j] += h;
            let mut tm = theta.clone();
            tm[j] -= h;
            let lp = self.loglik_value_only(&tp)?;
            let lm = self.loglik_value_only(&tm)?;
            grad[j] = (lp - lm) / (2.0 * h);
        }
        Ok((ll0, grad))
    }

    /// Log-likelihood without touching the state memo (finite differences
    /// must not evict the state at the expansion point).
    fn loglik_value_only(&self, theta: &DVector<f64>) -> Result<f64> {
        let param = theta_to_param(&self.model.layout, theta)?;
        if let Some(fast) = &self.fast {
            return Ok(self.fast_loglik(fast, &param));
        }
        let grams = self.grams_at(&param)?;
        let h = build_h_with(self.model, &grams, &param);
        let factor = sigma_factor_at(self.model, &h)?;
        let y = &self.model.y_centred;
        let quad = y.dot(&factor.apply_inv(param.psi, y));
        Ok(-0.5 * self.model.n as f64 * ln_2pi() - 0.5 * factor.logdet(param.psi) - 0.5 * quad)
    }

}
