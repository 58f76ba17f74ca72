//! Interior descent for the barrier objective.
//!
//! Every accepted iterate keeps all surrogate matrices positive definite: an
//! infeasible trial point evaluates to `+∞` and is rejected by the Armijo
//! backtracking like any other insufficient step.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use super::{
    gradient, gradient_with, hessian_with, objective, scaled_mse, smoothed_objective,
    CoefficientMatrix, FitResult, Hinge, ObjectiveParts, RegressionData,
};
use crate::error::{Error, Result};
use crate::sampling::fmt_f64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Solver {
    /// Damped Newton over a shrinking softplus smoothing of the hinge.
    Newton,
    /// Steepest descent with Armijo backtracking.
    GradientDescent,
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    pub solver: Solver,
    pub max_iters: usize,
    /// Stop once `(f_old - f_new) / |f_old|` drops below this.
    pub rel_tol: f64,
    /// Stop once `‖∇J‖_F` drops below this.
    pub grad_tol: f64,
    pub armijo_c: f64,
    /// Initial softplus width for the Newton solver's hinge smoothing.
    pub smoothing_start: f64,
    /// Width of the last smoothing stage.
    pub smoothing_final: f64,
    pub smoothing_factor: f64,
    pub record_trace: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            solver: Solver::Newton,
            max_iters: 5000,
            rel_tol: 1e-10,
            grad_tol: 1e-8,
            armijo_c: 1e-4,
            smoothing_start: 1.0,
            smoothing_final: 1e-9,
            smoothing_factor: 0.1,
            record_trace: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    GradientNorm,
    RelativeDecrease,
    /// No step along the search or steepest-descent direction lowers the
    /// objective at floating-point resolution, or a smoothing stage kept
    /// producing negligible damped steps.
    Stalled,
    MaxIters,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    pub objective: f64,
    pub mse_term: f64,
    pub reg_term: f64,
    pub barrier_term: f64,
    pub grad_norm: f64,
    pub step_size: f64,
}

/// Writes `iter,objective,mse_term,reg_term,barrier_term,grad_norm,step_size`.
pub fn write_trace(rows: &[TraceRow], path: &Path) -> Result<()> {
    let mut s = String::from("iter,objective,mse_term,reg_term,barrier_term,grad_norm,step_size\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.iter,
            fmt_f64(r.objective),
            fmt_f64(r.mse_term),
            fmt_f64(r.reg_term),
            fmt_f64(r.barrier_term),
            fmt_f64(r.grad_norm),
            fmt_f64(r.step_size)
        )
        .unwrap();
    }
    std::fs::write(path, s)?;
    Ok(())
}

const MIN_STEP: f64 = 1e-16;
/// Consecutive negligible damped steps tolerated within one stage.
const IDLE_LIMIT: usize = 25;
/// Iteration budget of a single smoothing stage.
const STAGE_LIMIT: usize = 400;

struct Problem<'a> {
    data: &'a RegressionData,
    beta: f64,
    mu: f64,
    armijo_c: f64,
}

struct Step {
    theta: DMatrix<f64>,
    exact: ObjectiveParts,
    model: f64,
    t: f64,
}

impl Problem<'_> {
    fn exact(&self, theta: &DMatrix<f64>) -> ObjectiveParts {
        objective(theta, self.data, self.beta, self.mu)
    }

    fn model(&self, theta: &DMatrix<f64>, hinge: Hinge) -> f64 {
        smoothed_objective(theta, self.data, self.beta, self.mu, hinge)
    }

    /// Backtracks from `start` until the trial point is feasible and the
    /// Armijo condition holds on the model.
    fn line_search(
        &self,
        theta: &DMatrix<f64>,
        dir: &DMatrix<f64>,
        model0: f64,
        slope: f64,
        hinge: Hinge,
        start: f64,
    ) -> Option<Step> {
        let mut t = start;
        while t >= MIN_STEP {
            let trial = theta + dir * t;
            let exact = self.exact(&trial);
            if exact.value.is_finite() {
                let model = if hinge == Hinge::Exact { exact.value } else { self.model(&trial, hinge) };
                if model <= model0 + self.armijo_c * t * slope {
                    return Some(Step { theta: trial, exact, model, t });
                }
            }
            t *= 0.5;
        }
        None
    }

    fn newton_direction(&self, theta: &DMatrix<f64>, g: &DMatrix<f64>, hinge: Hinge) -> Option<DMatrix<f64>> {
        let mut h = hessian_with(theta, self.data, self.beta, self.mu, hinge)?;
        let rhs = DVector::from_column_slice(g.as_slice());
        let dim = h.nrows();
        let scale = (0..dim).map(|i| h[(i, i)].abs()).fold(0.0, f64::max).max(1e-300);
        // Without ridge the quadratic part can be singular; add the smallest
        // Levenberg shift that lets Cholesky through.
        let mut shift = 0.0;
        for _ in 0..12 {
            if let Some(ch) = h.clone().cholesky() {
                let d = -ch.solve(&rhs);
                return Some(DMatrix::from_column_slice(theta.nrows(), theta.ncols(), d.as_slice()));
            }
            let next = if shift == 0.0 { 1e-14 * scale } else { shift * 100.0 };
            for i in 0..dim {
                h[(i, i)] += next - shift;
            }
            shift = next;
        }
        None
    }
}

/// Smoothing widths visited by the Newton solver, widest first.
fn smoothing_schedule(opts: &FitOptions) -> Vec<f64> {
    let mut eps = opts.smoothing_start;
    let mut out = vec![];
    while eps > opts.smoothing_final * (1.0 + 1e-9) {
        out.push(eps);
        eps *= opts.smoothing_factor;
    }
    out.push(opts.smoothing_final);
    out
}

/// Minimizes the barrier objective from `init` (the identity embedding when
/// `None`).
///
/// The Newton solver follows a sequence of softplus-smoothed hinges with
/// shrinking width; each trial step must satisfy Armijo on the smoothed model.
/// The returned coefficients are the iterate with the lowest exact objective.
pub fn fit(
    data: &RegressionData,
    beta: f64,
    mu: f64,
    init: Option<&CoefficientMatrix>,
    opts: &FitOptions,
) -> Result<FitResult> {
    if !(beta >= 0.0) || !(mu >= 0.0) {
        return Err(Error::InvalidInput(format!("beta and mu must be >= 0 (beta={beta}, mu={mu})")));
    }
    let nb = data.basis_len();
    let n = data.state_dim();
    let mut theta = match init {
        Some(t) => t.matrix().clone(),
        None => {
            let mut t = DMatrix::zeros(nb, n);
            for r in 0..n {
                t[(r, r)] = 1.0;
            }
            t
        }
    };
    if theta.shape() != (nb, n) {
        return Err(Error::InvalidInput(format!(
            "initial coefficients are {:?}, expected ({nb}, {n})",
            theta.shape()
        )));
    }
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("initial coefficients are not finite".into()));
    }
    let prob = Problem {
        data,
        beta,
        mu,
        armijo_c: opts.armijo_c,
    };
    let mut exact = prob.exact(&theta);
    if !exact.is_feasible() {
        return Err(Error::Infeasible("initial coefficients violate the barrier".into()));
    }

    // The incumbent is the iterate with the lowest exact objective; inner
    // iterates only replace it when they improve on it.
    let mut best = theta.clone();
    let mut trace = Vec::new();
    if opts.record_trace {
        let g0 = gradient(&theta, data, beta, mu)?;
        trace.push(row(0, &exact, g0.norm(), 0.0));
    }
    let mut best_exact = exact;
    let mut iterations = 0;
    let mut stop = StopReason::GradientNorm;

    let hinges: Vec<Hinge> = match opts.solver {
        Solver::Newton if mu > 0.0 => smoothing_schedule(opts).into_iter().map(Hinge::Softplus).collect(),
        Solver::Newton | Solver::GradientDescent => vec![Hinge::Exact],
    };
    'stages: for hinge in hinges {
        let mut model = if hinge == Hinge::Exact { exact.value } else { prob.model(&theta, hinge) };
        let mut gd_step: f64 = 1.0;
        let mut stage_iters = 0;
        let mut idle = 0;
        loop {
            let g = gradient_with(&theta, data, beta, mu, hinge)
                .ok_or_else(|| Error::Infeasible("iterate left the barrier domain".into()))?;
            let gnorm = g.norm();
            if gnorm < opts.grad_tol {
                stop = StopReason::GradientNorm;
                break;
            }
            if iterations >= opts.max_iters {
                stop = StopReason::MaxIters;
                break 'stages;
            }
            let mut step = None;
            let mut newton = false;
            if opts.solver == Solver::Newton {
                if let Some(d) = prob.newton_direction(&theta, &g, hinge) {
                    let slope = g.dot(&d);
                    if slope < 0.0 {
                        step = prob.line_search(&theta, &d, model, slope, hinge, 1.0);
                        newton = step.is_some();
                    }
                }
            }
            if step.is_none() {
                let start = (gd_step * 4.0).min(1e6);
                step = prob.line_search(&theta, &(-&g), model, -gnorm * gnorm, hinge, start);
                if let Some(s) = &step {
                    gd_step = s.t;
                }
            }
            let Some(step) = step else {
                stop = StopReason::Stalled;
                break;
            };
            iterations += 1;
            stage_iters += 1;
            let decrease = model - step.model;
            let rel_base = model.abs();
            theta = step.theta;
            exact = step.exact;
            model = step.model;
            if exact.value <= best_exact.value {
                best.clone_from(&theta);
                best_exact = exact;
                if opts.record_trace {
                    let gn = gradient(&best, data, beta, mu)?.norm();
                    trace.push(row(iterations, &best_exact, gn, step.t));
                }
            }
            // A damped Newton step says little about proximity to the
            // minimizer, so only full steps (or first-order steps) can end a stage.
            let full = !newton || step.t == 1.0;
            let small = decrease < opts.rel_tol * rel_base;
            if full && small {
                stop = StopReason::RelativeDecrease;
                break;
            }
            idle = if small { idle + 1 } else { 0 };
            if idle >= IDLE_LIMIT || stage_iters >= STAGE_LIMIT {
                stop = StopReason::Stalled;
                break;
            }
        }
    }
    let theta = best;
    let exact = best_exact;
    let grad_norm = gradient(&theta, data, beta, mu)?.norm();
    log::debug!(
        "fit: beta={beta:e} mu={mu:e} stop={stop:?} iters={iterations} J={:.6e} |g|={grad_norm:.3e}",
        exact.value
    );

    let mse_term = 0.5 * data.residual_sum_sq(&theta) / (data.orbit_count() * data.horizon()) as f64;
    let (l_mu, denom) = match scaled_mse(&theta, data) {
        Ok(v) => v,
        Err(_) => (f64::INFINITY, 0.0),
    };
    Ok(FitResult {
        theta: CoefficientMatrix::new(theta)?,
        objective: exact.value,
        mse_term,
        reg_term: exact.reg_term,
        barrier_term: exact.barrier_term,
        l_mu,
        denom,
        grad_norm,
        iterations,
        converged: stop != StopReason::MaxIters,
        stop,
        feasible: exact.is_feasible(),
        trace,
    })
}

fn row(iter: usize, p: &ObjectiveParts, grad_norm: f64, step_size: f64) -> TraceRow {
    TraceRow {
        iter,
        objective: p.value,
        mse_term: p.mse_term,
        reg_term: p.reg_term,
        barrier_term: p.barrier_term,
        grad_norm,
        step_size,
    }
}
