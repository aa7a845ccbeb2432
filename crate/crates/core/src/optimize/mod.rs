//! Nonlinear least squares: a shared Levenberg–Marquardt driver, pose-only
//! refinement, local bundle adjustment and ellipsoid estimation.

mod ba;
mod ellipsoid;
mod lm;
mod pose;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

pub use ba::{bundle_adjust, local_bundle_adjustment, BaEdge, BaProblem, BaReport, BaSolution};
pub use ellipsoid::{
    ellipsoid_cost, estimate_ellipsoid, initialize_ellipsoid, EllipsoidEstimate, EllipsoidObservation,
    EllipsoidParams,
};
pub use lm::{levenberg_marquardt, LmProblem};
pub use pose::{depth_residual, depth_jacobian, optimize_pose, MIN_POSE_MATCHES, reprojection_jacobian, reprojection_residual, PoseEstimate, PoseObservation};

use crate::geometry::GeometryError;

/// χ² threshold (2 DoF, 95 %) separating inlier from outlier reprojections.
pub const CHI2_2DOF_95: f64 = 5.991;
/// χ² threshold (3 DoF, 95 %) for reprojection terms that include depth.
pub const CHI2_3DOF_95: f64 = 7.815;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub max_iterations: usize,
    pub initial_damping: f64,
    /// Stop when an accepted step lowers the cost by less than this fraction.
    pub min_relative_decrease: f64,
    pub min_step_norm: f64,
    /// Huber kernel width in pixels for reprojection terms.
    pub huber_delta: f64,
    /// Focal length times virtual baseline (pixel·m) converting a measured
    /// depth into a right-image coordinate `u − bf/z`; 0 ignores depth.
    #[serde(default)]
    pub depth_bf: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self::pose()
    }
}

impl SolverConfig {
    fn with_iterations(max_iterations: usize) -> Self {
        Self {
            max_iterations,
            initial_damping: 1e-4,
            min_relative_decrease: 1e-6,
            min_step_norm: 1e-8,
            huber_delta: 2.45,
            depth_bf: 0.0,
        }
    }

    pub fn pose() -> Self {
        Self::with_iterations(10)
    }

    pub fn bundle() -> Self {
        Self::with_iterations(5)
    }

    pub fn ellipsoid() -> Self {
        Self::with_iterations(20)
    }

    /// Uses measured depths with the given `bf`.
    pub fn with_depth(self, depth_bf: f64) -> Self {
        Self { depth_bf, ..self }
    }

    pub fn is_valid(&self) -> bool {
        self.max_iterations > 0
            && self.initial_damping > 0.0
            && self.min_relative_decrease > 0.0
            && self.min_step_norm > 0.0
            && self.huber_delta > 0.0
            && self.depth_bf >= 0.0
            && self.depth_bf.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Converged,
    /// Iteration budget exhausted; the best iterate is returned.
    NotConverged,
}

/// One LM iteration, for diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    /// Cost of the current (best) iterate after this iteration.
    pub cost: f64,
    pub damping: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SolveReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub converged: bool,
    pub trace: Vec<IterationLog>,
    /// Later solver stages, each with a changed objective: the trace index
    /// where the stage starts and the stage's initial cost.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub stages: Vec<(usize, f64)>,
}

impl SolveReport {
    pub fn status(&self) -> SolveStatus {
        if self.converged {
            SolveStatus::Converged
        } else {
            SolveStatus::NotConverged
        }
    }

    /// True when no accepted step raised the cost of its stage.
    pub fn is_monotone(&self) -> bool {
        let mut last = self.initial_cost;
        for (i, it) in self.trace.iter().enumerate() {
            if let Some((_, c)) = self.stages.iter().find(|(start, _)| *start == i) {
                last = *c;
            }
            if it.cost > last {
                return false;
            }
            last = it.cost;
        }
        true
    }

    /// Appends a later stage that may optimize a different objective.
    pub(crate) fn extend(&mut self, other: SolveReport) {
        if self.trace.is_empty() && self.iterations == 0 {
            self.initial_cost = other.initial_cost;
        } else {
            self.stages.push((self.trace.len(), other.initial_cost));
        }
        let offset = self.iterations;
        self.trace.extend(other.trace.into_iter().map(|mut t| {
            t.iteration += offset;
            t
        }));
        self.iterations += other.iterations;
        self.final_cost = other.final_cost;
        self.converged = other.converged;
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OptimizeError {
    #[error("need at least {needed} matches, got {got}")]
    TooFewMatches { needed: usize, got: usize },
    #[error("need at least 3 views, got {0}")]
    TooFewViews(usize),
    #[error("viewing rays span less than 5 degrees")]
    DegenerateBaseline,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Huber cost `ρ(s)` of a squared residual `s`.
#[inline]
pub fn huber_cost(s: f64, delta: f64) -> f64 {
    if s <= delta * delta {
        s
    } else {
        2.0 * delta * s.sqrt() - delta * delta
    }
}

/// IRLS weight `ρ'(s)` of a squared residual.
#[inline]
pub fn huber_weight(s: f64, delta: f64) -> f64 {
    if s <= delta * delta {
        1.0
    } else {
        delta / s.sqrt()
    }
}

/// Central-difference Jacobian of `f` at `x`.
pub fn central_difference<F>(f: F, x: &DVector<f64>, h: f64) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let m = f(x).len();
    let mut j = DMatrix::zeros(m, x.len());
    let mut xp = x.clone();
    for c in 0..x.len() {
        let orig = xp[c];
        xp[c] = orig + h;
        let fp = f(&xp);
        xp[c] = orig - h;
        let fm = f(&xp);
        xp[c] = orig;
        j.set_column(c, &((fp - fm) / (2.0 * h)));
    }
    j
}

/// Compares an analytic Jacobian with central differences of `f` and returns
/// `max |A − N| / max |N|`.
pub fn numeric_jacobian_check<F>(f: F, x: &DVector<f64>, analytic: &DMatrix<f64>) -> f64
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let numeric = central_difference(f, x, 1e-6);
    let scale = numeric.amax().max(f64::MIN_POSITIVE);
    (analytic - numeric).amax() / scale
}
