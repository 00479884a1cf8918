//! EM estimation.
//!
//! E-step: with w | y ~ N(w~, Sigma^-1), compute the posterior moments
//! w~ = psi H Sigma^-1 y~ and W~ = Sigma^-1 + w~ w~'.
//!
//! M-step (expectation conditional maximisation, each block conditionally
//! maximising the Q function so the log-likelihood never decreases):
//!   - every scale lambda_k that enters H linearly has the closed-form
//!     conditional update
//!       lambda_k = (y~' G w~ - tr(G R W~)) / tr(G^2 W~),
//!     where G = dH/dlambda_k and R = H - lambda_k G (Q is quadratic in
//!     each lambda_k singly, even with pairwise interactions);
//!   - kernel parameters and polynomial scales (which enter H nonlinearly)
//!     maximise Q numerically by L-BFGS over their unconstrained slots;
//!   - psi has the closed-form update
//!       psi = sqrt( tr(W~) / E||y~ - H w||^2 ),
//!     E||y~ - H w||^2 = y~'y~ - 2 y~' H w~ + tr(H^2 W~).
//!
//! Models whose H is a fixed Gram times a single scale run the same
//! iteration in the eigenbasis of that Gram at O(n) per step.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{sym_eigen, SigmaFactor};
use crate::model::{
    param_to_theta, scaled_term, theta_to_param, LoadedModel, ParamVector, SlotKind,
};
use crate::optimize::{self, LbfgsOptions};

use super::evaluator::{ln_2pi, sumprod, Evaluator};
use super::{ConvergenceStatus, ControlOptions};

pub(crate) struct EmOutcome {
    pub theta: DVector<f64>,
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub status: ConvergenceStatus,
    pub message: String,
}

pub(crate) fn run_em(
    model: &LoadedModel,
    evaluator: &Evaluator<'_>,
    theta0: DVector<f64>,
    max_iterations: usize,
    control: &ControlOptions,
) -> Result<EmOutcome> {
    if model.is_nystrom() {
        return Err(Error::Spec(
            "EM and mixed methods are unavailable under the Nystrom approximation; use direct or fixed".into(),
        ));
    }
    let mut param = theta_to_param(&model.layout, &theta0)?;

    // Slot classification.
    let closed_lambda: Vec<usize> = model
        .layout
        .slots
        .iter()
        .filter_map(|s| match s.kind {
            SlotKind::Lambda(k) if !model.kernels[k].is_poly() => Some(k),
            _ => None,
        })
        .collect();
    let numeric_slots: Vec<usize> = model
        .layout
        .slots
        .iter()
        .enumerate()
        .filter_map(|(j, s)| match s.kind {
            SlotKind::KernelParam(_) => Some(j),
            SlotKind::Lambda(k) if model.kernels[k].is_poly() => Some(j),
            _ => None,
        })
        .collect();

    let fast = numeric_slots.is_empty() && evaluator.has_fast_path();
    let outcome = if fast {
        em_fast(model, evaluator, &mut param, max_iterations, control, !closed_lambda.is_empty())?
    } else {
        em_general(
            model,
            evaluator,
            &mut param,
            max_iterations,
            control,
            &closed_lambda,
            &numeric_slots,
        )?
    };

    // The closed-form updates work on the natural scale, where a single
    // scale may end negative; its sign is not identified for a lone term,
    // so fold it back into the log-transformed slot's domain.
    if model.layout.single_lambda_log_slot() && param.lambda[0] < 0.0 {
        param.lambda[0] = -param.lambda[0];
    }
    let theta = param_to_theta(&model.layout, &param)?;
    Ok(EmOutcome {
        theta,
        trace: outcome.0,
        iterations: outcome.1,
        status: outcome.2,
        message: outcome.3,
    })
}

type LoopOutcome = (Vec<f64>, usize, ConvergenceStatus, String);

fn em_general(
    model: &LoadedModel,
    evaluator: &Evaluator<'_>,
    param: &mut ParamVector,
    max_iterations: usize,
    control: &ControlOptions,
    closed_lambda: &[usize],
    numeric_slots: &[usize],
) -> Result<LoopOutcome> {
    let y = &model.y_centred;
    let yy = y.norm_squared();
    let n = model.n;
    let mut trace: Vec<f64> = Vec::new();
    let mut iterations = 0;
    let mut status = ConvergenceStatus::MaxitReached;
    let mut message = format!("EM reached the maximum of {max_iterations} iterations");

    loop {
        let grams = evaluator.grams_at(param)?;
        let mut scaled: Vec<DMatrix<f64>> =
            (0..model.kernels.len()).map(|k| scaled_term(model, &grams, k, param)).collect();
        let mut h = assemble_h(model, &grams, &scaled, param);
        let psi = param.psi;
        let fac = sym_eigen(&h)?;
        let sf = SigmaFactor::Dense(fac);
        let quad = y.dot(&sf.apply_inv(psi, y));
        let ll = -0.5 * n as f64 * ln_2pi() - 0.5 * sf.logdet(psi) - 0.5 * quad;
        if !ll.is_finite() {
            return Err(Error::Numerical("EM reached a non-finite log-likelihood".into()));
        }
        if let Some(&prev) = trace.last() {
            if ll < prev - 1e-9 {
                return Err(Error::Numerical(format!(
                    "EM log-likelihood decreased from {prev:.10} to {ll:.10}; M-step is inconsistent"
                )));
            }
            if ll - prev < control.stop_crit {
                trace.push(ll);
                status = ConvergenceStatus::Converged;
                message = format!("Converged after {iterations} iterations.");
                break;
            }
        }
        trace.push(ll);
        if iterations >= max_iterations {
            break;
        }

        // E-step moments at the current parameters.
        let sigma_inv = sf.sigma_inv_dense(psi);
        let w = sf.posterior_w_mean(psi, y);
        let wmat = &sigma_inv + &w * w.transpose();
        let tr_w = sigma_inv.trace() + w.norm_squared();

        // Closed-form scale updates, one conditional maximisation each.
        for &k in closed_lambda {
            let g = evaluator.dh_dlambda(&grams, param, &scaled, k);
            let p = &g * &wmat;
            let den = sumprod(&g, &p);
            if !(den > 1e-300) {
                continue;
            }
            let r = &h - &g * param.lambda[k];
            let num = (&g * y).dot(&w) - sumprod(&r, &p);
            let lam_new = num / den;
            if !lam_new.is_finite() {
                continue;
            }
            param.lambda[k] = lam_new;
            scaled[k] = scaled_term(model, &grams, k, param);
            h = r + g * lam_new;
        }

        // Numeric block: maximise Q over kernel-parameter and polynomial
        // scale slots (L-BFGS on the unconstrained coordinates).
        if !numeric_slots.is_empty() {
            maximise_q_numeric(
                model, evaluator, param, &wmat, &w, psi, numeric_slots, control,
            )?;
            let grams2 = evaluator.grams_at(param)?;
            scaled =
                (0..model.kernels.len()).map(|k| scaled_term(model, &grams2, k, param)).collect();
            h = assemble_h(model, &grams2, &scaled, param);
        }

        // Closed-form psi update.
        if has_psi_slot(model) {
            let hw = &h * &w;
            let e_fit = yy - 2.0 * y.dot(&hw) + sumprod(&h, &(&h * &wmat));
            if e_fit > 0.0 && tr_w > 0.0 {
                param.psi = (tr_w / e_fit).sqrt();
            }
        }
        iterations += 1;
        if !control.silent && iterations % 100 == 0 {
            eprintln!("em iteration {iterations}, log-likelihood {ll:.6}");
        }
    }
    Ok((trace, iterations, status, message))
}

/// Eigenbasis EM for models where H = s * H_base with fixed H_base:
/// everything reduces to O(n) diagonal work per iteration.
fn em_fast(
    model: &LoadedModel,
    evaluator: &Evaluator<'_>,
    param: &mut ParamVector,
    max_iterations: usize,
    control: &ControlOptions,
    update_lambda: bool,
) -> Result<LoopOutcome> {
    let (u, y_proj, resid_sq, lambda_scaled) =
        evaluator.fast_parts().expect("fast path checked by caller");
    debug_assert!(resid_sq == 0.0, "EM runs on the dense path only");
    let n = model.n as f64;
    let r = u.len();
    let yy = model.y_centred.norm_squared();
    let mut trace: Vec<f64> = Vec::new();
    let mut iterations = 0;
    let mut status = ConvergenceStatus::MaxitReached;
    let mut message = format!("EM reached the maximum of {max_iterations} iterations");

    loop {
        let s = if lambda_scaled { param.lambda[0] } else { 1.0 };
        let psi = param.psi;
        let mut logdet = 0.0;
        let mut quad = 0.0;
        for i in 0..r {
            let d = psi * (s * u[i]).powi(2) + 1.0 / psi;
            logdet += d.ln();
            quad += y_proj[i] * y_proj[i] / d;
        }
        let ll = -0.5 * n * ln_2pi() - 0.5 * logdet - 0.5 * quad;
        if !ll.is_finite() {
            return Err(Error::Numerical("EM reached a non-finite log-likelihood".into()));
        }
        if let Some(&prev) = trace.last() {
            if ll < prev - 1e-9 {
                return Err(Error::Numerical(format!(
                    "EM log-likelihood decreased from {prev:.10} to {ll:.10}; M-step is inconsistent"
                )));
            }
            if ll - prev < control.stop_crit {
                trace.push(ll);
                status = ConvergenceStatus::Converged;
                message = format!("Converged after {iterations} iterations.");
                break;
            }
        }
        trace.push(ll);
        if iterations >= max_iterations {
            break;
        }

        // E-step in eigen coordinates: w_i = psi s u_i y_i / d_i,
        // W~ = diag(1/d) + w w'.
        let mut w = DVector::zeros(r);
        let mut dvec = DVector::zeros(r);
        for i in 0..r {
            let d = psi * (s * u[i]).powi(2) + 1.0 / psi;
            dvec[i] = d;
            w[i] = psi * s * u[i] * y_proj[i] / d;
        }
        let tr_w: f64 = dvec.iter().map(|&d| 1.0 / d).sum::<f64>() + w.norm_squared();

        let mut s_new = s;
        if update_lambda && lambda_scaled {
            // G = H_base: num = y' G w, den = tr(G^2 W~).
            let mut num = 0.0;
            let mut den = 0.0;
            for i in 0..r {
                num += u[i] * y_proj[i] * w[i];
                den += u[i] * u[i] * (1.0 / dvec[i] + w[i] * w[i]);
            }
            if den > 1e-300 && (num / den).is_finite() {
                s_new = num / den;
                param.lambda[0] = s_new;
            }
        }

        if has_psi_slot(model) {
            // E||y - H w||^2 with the updated scale.
            let mut e_fit = yy;
            let mut cross = 0.0;
            let mut h2w = 0.0;
            for i in 0..r {
                let hu = s_new * u[i];
                cross += hu * y_proj[i] * w[i];
                h2w += hu * hu * (1.0 / dvec[i] + w[i] * w[i]);
            }
            e_fit += -2.0 * cross + h2w;
            if e_fit > 0.0 && tr_w > 0.0 {
                param.psi = (tr_w / e_fit).sqrt();
            }
        }
        iterations += 1;
        if !control.silent && iterations % 500 == 0 {
            eprintln!("em iteration {iterations}, log-likelihood {ll:.6}");
        }
    }
    Ok((trace, iterations, status, message))
}

fn has_psi_slot(model: &LoadedModel) -> bool {
    model.layout.slots.iter().any(|s| matches!(s.kind, SlotKind::Psi))
}

fn assemble_h(
    model: &LoadedModel,
    grams: &crate::model::TermGrams,
    scaled: &[DMatrix<f64>],
    param: &ParamVector,
) -> DMatrix<f64> {
    let (rr, cc) = (scaled[0].nrows(), scaled[0].ncols());
    let mut h = DMatrix::zeros(rr, cc);
    for s in scaled {
        h += s;
    }
    for (idx, &(a, b)) in model.spec.interactions.iter().enumerate() {
        match &grams.inter[idx] {
            Some(pre) => h += pre * (param.lambda[a] * param.lambda[b]),
            None => h += scaled[a].component_mul(&scaled[b]),
        }
    }
    h
}

/// One GEM block: numerically maximise Q over the nonlinear slots holding
/// the posterior moments fixed. L-BFGS only ever accepts improvements, so Q
/// cannot decrease.
fn maximise_q_numeric(
    model: &LoadedModel,
    evaluator: &Evaluator<'_>,
    param: &mut ParamVector,
    wmat: &DMatrix<f64>,
    w: &DVector<f64>,
    psi: f64,
    numeric_slots: &[usize],
    control: &ControlOptions,
) -> Result<()> {
    let theta_full = param_to_theta(&model.layout, param)?;
    let x0 = DVector::from_fn(numeric_slots.len(), |i, _| theta_full[numeric_slots[i]]);

    struct QObjective<'a, 'm> {
        model: &'a LoadedModel,
        evaluator: &'a Evaluator<'m>,
        theta_full: DVector<f64>,
        numeric_slots: &'a [usize],
        wmat: &'a DMatrix<f64>,
        w: &'a DVector<f64>,
        psi: f64,
        failed: bool,
    }

    impl<'a, 'm> QObjective<'a, 'm> {
        fn param_at(&self, x: &DVector<f64>) -> Option<ParamVector> {
            let mut theta = self.theta_full.clone();
            for (i, &j) in self.numeric_slots.iter().enumerate() {
                theta[j] = x[i];
            }
            let mut p = theta_to_param(&self.model.layout, &theta).ok()?;
            p.psi = self.psi;
            Some(p)
        }

        /// -Q up to terms constant in the nonlinear slots.
        fn neg_q(&self, p: &ParamVector) -> Option<(f64, DMatrix<f64>, Vec<DMatrix<f64>>)> {
            let grams = self.evaluator.grams_at(p).ok()?;
            let scaled: Vec<DMatrix<f64>> = (0..self.model.kernels.len())
                .map(|k| scaled_term(self.model, &grams, k, p))
                .collect();
            let h = assemble_h(self.model, &grams, &scaled, p);
            let y = &self.model.y_centred;
            let q = y.dot(&(&h * self.w)) - 0.5 * sumprod(&h, &(&h * self.wmat));
            if !q.is_finite() {
                return None;
            }
            Some((-self.psi * q, h, scaled))
        }
    }

    impl optimize::Objective for QObjective<'_, '_> {
        fn value(&mut self, x: &DVector<f64>) -> Option<f64> {
            let p = self.param_at(x)?;
            Some(self.neg_q(&p)?.0)
        }

        fn value_grad(&mut self, x: &DVector<f64>) -> Option<(f64, DVector<f64>)> {
            let p = self.param_at(x)?;
            let (f, h, scaled) = self.neg_q(&p)?;
            let grams = self.evaluator.grams_at(&p).ok()?;
            let hw = &h * self.wmat;
            let y = &self.model.y_centred;
            let mut grad = DVector::zeros(x.len());
            for (i, &j) in self.numeric_slots.iter().enumerate() {
                let slot = self.model.layout.slots[j];
                let dh = match slot.kind {
                    SlotKind::Lambda(k) => self.evaluator.dh_dlambda(&grams, &p, &scaled, k),
                    SlotKind::KernelParam(k) => {
                        match self.evaluator.dh_dkparam(&grams, &p, &scaled, k) {
                            Ok(m) => m,
                            Err(_) => {
                                self.failed = true;
                                return None;
                            }
                        }
                    }
                    SlotKind::Psi => unreachable!("psi is not a numeric M-step slot"),
                };
                let dq = y.dot(&(&dh * self.w)) - sumprod(&dh, &hw);
                grad[i] = -self.psi * dq * slot.transform.dnatural_dtheta(x[i]);
            }
            Some((f, grad))
        }
    }

    let mut obj = QObjective {
        model,
        evaluator,
        theta_full: theta_full.clone(),
        numeric_slots,
        wmat,
        w,
        psi,
        failed: false,
    };
    let opts = LbfgsOptions {
        maxit: 30,
        f_tol: (control.stop_crit * 1e-2).max(1e-12),
        grad_tol: 0.0,
        memory: 10,
    };
    let out = optimize::minimize(&mut obj, x0, &opts, |_, _| {});
    let mut theta = theta_full;
    for (i, &j) in numeric_slots.iter().enumerate() {
        theta[j] = out.x[i];
    }
    let mut p = theta_to_param(&model.layout, &theta)?;
    p.psi = param.psi;
    *param = p;
    Ok(())
}
