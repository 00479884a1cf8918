//! Limited-memory BFGS minimiser with a backtracking Armijo line search.
//!
//! Deliberately small: dense vectors, two-loop recursion, memory of 10
//! curvature pairs, and defensive handling of non-finite objective values
//! (a trial point that evaluates to NaN/inf simply shrinks the step).

use nalgebra::DVector;

/// Objective with optionally cheaper value-only evaluation (used inside the
/// line search). `None` signals a non-finite value at that point.
pub(crate) trait Objective {
    fn value(&mut self, x: &DVector<f64>) -> Option<f64>;
    fn value_grad(&mut self, x: &DVector<f64>) -> Option<(f64, DVector<f64>)>;
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct LbfgsOptions {
    pub maxit: usize,
    /// Stop when an accepted step improves the objective by less than this.
    pub f_tol: f64,
    pub grad_tol: f64,
    pub memory: usize,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        LbfgsOptions { maxit: 100, f_tol: 1e-8, grad_tol: 1e-10, memory: 10 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum StopReason {
    FtolReached,
    GradTolReached,
    MaxIterations,
    LineSearchStalled,
    NonFiniteStart,
}

#[derive(Clone, Debug)]
pub(crate) struct LbfgsOutcome {
    pub x: DVector<f64>,
    pub f: f64,
    pub iterations: usize,
    pub stop: StopReason,
    /// Objective value at the start and after each accepted iteration.
    pub trace: Vec<f64>,
}

pub(crate) fn minimize<O: Objective>(
    obj: &mut O,
    x0: DVector<f64>,
    opts: &LbfgsOptions,
    mut on_iter: impl FnMut(usize, f64),
) -> LbfgsOutcome {
    let (mut f, mut g) = match obj.value_grad(&x0) {
        Some(v) => v,
        None => {
            return LbfgsOutcome {
                x: x0,
                f: f64::INFINITY,
                iterations: 0,
                stop: StopReason::NonFiniteStart,
                trace: vec![],
            }
        }
    };
    let mut x = x0;
    let mut trace = vec![f];
    let mut s_hist: Vec<DVector<f64>> = Vec::new();
    let mut y_hist: Vec<DVector<f64>> = Vec::new();
    let mut rho_hist: Vec<f64> = Vec::new();

    let mut stop = StopReason::MaxIterations;
    let mut iterations = 0;
    for iter in 0..opts.maxit {
        if g.norm() <= opts.grad_tol {
            stop = StopReason::GradTolReached;
            break;
        }
        // Two-loop recursion for the search direction.
        let mut q = g.clone();
        let k = s_hist.len();
        let mut alpha = vec![0.0; k];
        for i in (0..k).rev() {
            alpha[i] = rho_hist[i] * s_hist[i].dot(&q);
            q -= &y_hist[i] * alpha[i];
        }
        if k > 0 {
            let last = k - 1;
            let gamma = s_hist[last].dot(&y_hist[last]) / y_hist[last].dot(&y_hist[last]);
            q *= gamma;
        }
        for i in 0..k {
            let beta = rho_hist[i] * y_hist[i].dot(&q);
            q += &s_hist[i] * (alpha[i] - beta);
        }
        let mut dir = -q;
        let mut slope = dir.dot(&g);
        if !(slope < 0.0) || !slope.is_finite() {
            // Not a descent direction; fall back to steepest descent.
            s_hist.clear();
            y_hist.clear();
            rho_hist.clear();
            dir = -g.clone();
            slope = dir.dot(&g);
            if !(slope < 0.0) {
                stop = StopReason::GradTolReached;
                break;
            }
        }

        // Backtracking Armijo search.
        let mut step = if iter == 0 { (1.0 / dir.norm()).min(1.0) } else { 1.0 };
        let c1 = 1e-4;
        let mut accepted = None;
        for _ in 0..50 {
            let cand = &x + &dir * step;
            if let Some(fc) = obj.value(&cand) {
                if fc <= f + c1 * step * slope {
                    accepted = Some((cand, fc));
                    break;
                }
            }
            step *= 0.5;
        }
        let (x_new, f_new) = match accepted {
            Some(v) => v,
            None => {
                stop = StopReason::LineSearchStalled;
                break;
            }
        };
        let (_, g_new) = match obj.value_grad(&x_new) {
            Some(v) => v,
            None => {
                stop = StopReason::LineSearchStalled;
                break;
            }
        };

        let s = &x_new - &x;
        let yv = &g_new - &g;
        let sy = s.dot(&yv);
        if sy > 1e-10 * s.norm() * yv.norm() {
            if s_hist.len() == opts.memory {
                s_hist.remove(0);
                y_hist.remove(0);
                rho_hist.remove(0);
            }
            rho_hist.push(1.0 / sy);
            s_hist.push(s);
            y_hist.push(yv);
        }

        let improvement = f - f_new;
        x = x_new;
        f = f_new;
        g = g_new;
        iterations = iter + 1;
        trace.push(f);
        on_iter(iterations, f);
        if improvement.abs() < opts.f_tol {
            stop = StopReason::FtolReached;
            break;
        }
    }
    LbfgsOutcome { x, f, iterations, stop, trace }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Quadratic;
    impl Objective for Quadratic {
        fn value(&mut self, x: &DVector<f64>) -> Option<f64> {
            Some(2.0 * (x[0] - 3.0).powi(2) + 0.5 * (x[1] + 1.0).powi(2))
        }
        fn value_grad(&mut self, x: &DVector<f64>) -> Option<(f64, DVector<f64>)> {
            let g = DVector::from_vec(vec![4.0 * (x[0] - 3.0), x[1] + 1.0]);
            Some((self.value(x)?, g))
        }
    }

    struct Rosenbrock;
    impl Objective for Rosenbrock {
        fn value(&mut self, x: &DVector<f64>) -> Option<f64> {
            Some((1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2))
        }
        fn value_grad(&mut self, x: &DVector<f64>) -> Option<(f64, DVector<f64>)> {
            let g = DVector::from_vec(vec![
                -2.0 * (1.0 - x[0]) - 400.0 * x[0] * (x[1] - x[0] * x[0]),
                200.0 * (x[1] - x[0] * x[0]),
            ]);
            Some((self.value(x)?, g))
        }
    }

    #[test]
    fn quadratic_converges_to_minimum() {
        let out = minimize(
            &mut Quadratic,
            DVector::from_vec(vec![0.0, 0.0]),
            &LbfgsOptions::default(),
            |_, _| {},
        );
        assert!((out.x[0] - 3.0).abs() < 1e-6, "{:?}", out);
        assert!((out.x[1] + 1.0).abs() < 1e-6);
        assert!(matches!(out.stop, StopReason::FtolReached | StopReason::GradTolReached));
        // Monotone decreasing trace.
        for w in out.trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
    }

    #[test]
    fn rosenbrock_converges() {
        let opts = LbfgsOptions { maxit: 500, f_tol: 1e-14, ..Default::default() };
        let out = minimize(&mut Rosenbrock, DVector::from_vec(vec![-1.2, 1.0]), &opts, |_, _| {});
        assert!((out.x[0] - 1.0).abs() < 1e-4, "{:?}", out.x);
        assert!((out.x[1] - 1.0).abs() < 1e-4);
    }

    struct PartialDomain;
    impl Objective for PartialDomain {
        fn value(&mut self, x: &DVector<f64>) -> Option<f64> {
            // Only defined for x < 2; the optimiser must survive NaN trials.
            if x[0] >= 2.0 {
                None
            } else {
                Some((x[0] - 1.5).powi(2))
            }
        }
        fn value_grad(&mut self, x: &DVector<f64>) -> Option<(f64, DVector<f64>)> {
            Some((self.value(x)?, DVector::from_vec(vec![2.0 * (x[0] - 1.5)])))
        }
    }

    #[test]
    fn survives_non_finite_regions() {
        let out = minimize(
            &mut PartialDomain,
            DVector::from_vec(vec![-10.0]),
            &LbfgsOptions::default(),
            |_, _| {},
        );
        assert!((out.x[0] - 1.5).abs() < 1e-5);
    }

    #[test]
    fn non_finite_start_reported() {
        let out = minimize(
            &mut PartialDomain,
            DVector::from_vec(vec![5.0]),
            &LbfgsOptions::default(),
            |_, _| {},
        );
        assert_eq!(out.stop, StopReason::NonFiniteStart);
    }
}
