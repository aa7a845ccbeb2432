use nalgebra::{DMatrix, DVector};

use super::{IterationLog, SolveReport, SolverConfig};

/// A least-squares problem driven by [`levenberg_marquardt`].
pub trait LmProblem {
    type Params: Clone;
    /// Linearized normal equations at a given iterate.
    type System;

    /// Total (robustified) cost; `f64::INFINITY` marks an invalid iterate.
    fn cost(&self, p: &Self::Params) -> f64;

    fn linearize(&self, p: &Self::Params) -> Self::System;

    /// Step `δ` solving `(H + λ·diag H) δ = −g`, or `None` when singular.
    fn solve(&self, sys: &Self::System, lambda: f64) -> Option<DVector<f64>>;

    fn retract(&self, p: &Self::Params, step: &DVector<f64>) -> Self::Params;
}

const MAX_DAMPING: f64 = 1e16;

/// Levenberg–Marquardt with multiplicative damping (×10 on reject, ×0.1 on
/// accept). Only cost-decreasing steps are accepted, so the cost trace of the
/// returned report is non-increasing.
pub fn levenberg_marquardt<P: LmProblem>(problem: &P, init: P::Params, cfg: &SolverConfig) -> (P::Params, SolveReport) {
    let mut x = init;
    let mut cost = problem.cost(&x);
    let mut lambda = cfg.initial_damping;
    let mut report = SolveReport { initial_cost: cost, final_cost: cost, ..Default::default() };
    if cost == 0.0 || !cost.is_finite() {
        report.converged = cost == 0.0;
        return (x, report);
    }
    let mut sys = problem.linearize(&x);
    for iteration in 1..=cfg.max_iterations {
        report.iterations = iteration;
        let mut accepted = false;
        let mut done = false;
        match problem.solve(&sys, lambda) {
            Some(step) if step.norm() < cfg.min_step_norm => done = true,
            Some(step) => {
                let candidate = problem.retract(&x, &step);
                let c = problem.cost(&candidate);
                if c.is_finite() && c < cost {
                    let rel = (cost - c) / cost;
                    debug_assert!(c <= cost);
                    x = candidate;
                    cost = c;
                    lambda = (lambda * 0.1).max(1e-15);
                    accepted = true;
                    done = rel < cfg.min_relative_decrease || cost == 0.0;
                } else {
                    lambda *= 10.0;
                }
            }
            None => lambda *= 10.0,
        }
        report.trace.push(IterationLog { iteration, cost, damping: lambda, accepted });
        if done || lambda > MAX_DAMPING {
            report.converged = true;
            break;
        }
        if accepted {
            sys = problem.linearize(&x);
        }
    }
    report.final_cost = cost;
    (x, report)
}

/// Dense normal equations `H = JᵀWJ`, `g = JᵀWr`.
#[derive(Debug, Clone)]
pub(crate) struct DenseSystem {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
}

impl DenseSystem {
    pub fn zeros(n: usize) -> Self {
        Self { h: DMatrix::zeros(n, n), g: DVector::zeros(n) }
    }

    pub fn solve(&self, lambda: f64) -> Option<DVector<f64>> {
        let mut a = self.h.clone();
        for i in 0..a.nrows() {
            a[(i, i)] += lambda * self.h[(i, i)].max(1e-12);
        }
        let step = a.cholesky()?.solve(&(-&self.g));
        step.iter().all(|v| v.is_finite()).then_some(step)
    }
}
