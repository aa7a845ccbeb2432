use nalgebra::{DVector, Matrix3, Rotation3, UnitQuaternion, Vector3};

use super::lm::{levenberg_marquardt, DenseSystem, LmProblem};
use super::{OptimizeError, SolveReport, SolverConfig};
use crate::features::Detection;
use crate::geometry::{
    ellipsoid_to_dual_quadric, project_dual_quadric_gaussian, sqrtm_spd2, Ellipsoid, Gaussian2D, Intrinsics, Pose,
};
use crate::metrics::{wasserstein2_sq, WassersteinForm};

/// Residual entry (pixels) charged when an observation cannot be predicted.
const PROJECTION_PENALTY: f64 = 1e3;
const MIN_VIEWS: usize = 3;
const MIN_BASELINE_DEG: f64 = 5.0;
/// Iterations before the per-observation cap is introduced.
const CAP_AFTER: usize = 5;
const CAP_PERCENTILE: f64 = 0.95;
const FD_STEP: f64 = 1e-6;

/// Minimal ellipsoid parameterization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EllipsoidParams {
    pub center: Vector3<f64>,
    /// Natural log of the semi-axes.
    pub log_axes: Vector3<f64>,
    /// Axis-angle vector of the body rotation.
    pub rotation: Vector3<f64>,
}

impl EllipsoidParams {
    pub fn from_ellipsoid(e: &Ellipsoid) -> Self {
        let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(e.rotation));
        Self { center: e.center, log_axes: e.semi_axes.map(f64::ln), rotation: q.scaled_axis() }
    }

    pub fn to_ellipsoid(&self) -> Result<Ellipsoid, OptimizeError> {
        let r = UnitQuaternion::from_scaled_axis(self.rotation).to_rotation_matrix().into_inner();
        Ok(Ellipsoid::new(self.center, self.log_axes.map(f64::exp), r)?)
    }
}

/// An ellipse observation (as a Gaussian) and the pose of its camera.
#[derive(Debug, Clone, Copy)]
pub struct EllipsoidObservation {
    pub gaussian: Gaussian2D,
    pub pose: Pose,
}

#[derive(Debug, Clone)]
pub struct EllipsoidEstimate {
    pub ellipsoid: Ellipsoid,
    /// Uncapped objective `Σ W₂²` at the estimate.
    pub cost: f64,
    /// Observations above the cap in the final stage.
    pub capped: usize,
    pub report: SolveReport,
}

#[derive(Debug, Clone, Copy)]
struct State {
    center: Vector3<f64>,
    log_axes: Vector3<f64>,
    rotation: Matrix3<f64>,
}

impl State {
    fn ellipsoid(&self) -> Option<Ellipsoid> {
        Ellipsoid::new(self.center, self.log_axes.map(f64::exp), self.rotation).ok()
    }

    /// Body-frame center increment, log-axis increment, right rotation increment.
    fn retract(&self, d: &[f64]) -> State {
        let dc = Vector3::new(d[0], d[1], d[2]);
        let dr = UnitQuaternion::from_scaled_axis(Vector3::new(d[6], d[7], d[8])).to_rotation_matrix().into_inner();
        let rotation = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.rotation * dr)).to_rotation_matrix().into_inner();
        State {
            center: self.center + self.rotation * dc,
            log_axes: self.log_axes + Vector3::new(d[3], d[4], d[5]),
            rotation,
        }
    }
}

fn residual_len(form: WassersteinForm) -> usize {
    match form {
        WassersteinForm::Frobenius => 5,
        WassersteinForm::BuresTrace => 3,
    }
}

/// Residual vector whose squared norm is `W₂²` between the predicted and
/// observed Gaussians.
fn observation_residual(e: Option<&Ellipsoid>, obs: &EllipsoidObservation, k: &Intrinsics, form: WassersteinForm) -> Vec<f64> {
    let n = residual_len(form);
    let Some(pred) = e.and_then(|e| project_dual_quadric_gaussian(&ellipsoid_to_dual_quadric(e), &obs.pose, k).ok()) else {
        return vec![PROJECTION_PENALTY; n];
    };
    let dm = pred.mean - obs.gaussian.mean;
    match form {
        WassersteinForm::Frobenius => {
            let (Ok(a), Ok(b)) = (sqrtm_spd2(&pred.covariance), sqrtm_spd2(&obs.gaussian.covariance)) else {
                return vec![PROJECTION_PENALTY; n];
            };
            let s = a - b;
            vec![dm.x, dm.y, s[(0, 0)], std::f64::consts::SQRT_2 * 0.5 * (s[(0, 1)] + s[(1, 0)]), s[(1, 1)]]
        }
        WassersteinForm::BuresTrace => {
            let cov = wasserstein2_sq(&pred, &Gaussian2D { mean: pred.mean, ..obs.gaussian }, form);
            vec![dm.x, dm.y, cov.max(0.0).sqrt()]
        }
    }
}

/// Plain objective `Σ_f W₂²(observed, predicted)`.
pub fn ellipsoid_cost(e: &Ellipsoid, obs: &[EllipsoidObservation], k: &Intrinsics, form: WassersteinForm) -> f64 {
    obs.iter()
        .map(|o| observation_residual(Some(e), o, k, form).iter().map(|v| v * v).sum::<f64>())
        .sum()
}

struct EllipsoidProblem<'a> {
    obs: &'a [EllipsoidObservation],
    k: &'a Intrinsics,
    form: WassersteinForm,
    cap: f64,
}

impl EllipsoidProblem<'_> {
    fn per_observation(&self, s: &State) -> Vec<Vec<f64>> {
        let e = s.ellipsoid();
        self.obs.iter().map(|o| observation_residual(e.as_ref(), o, self.k, self.form)).collect()
    }
}

fn sq(r: &[f64]) -> f64 {
    r.iter().map(|v| v * v).sum()
}

impl LmProblem for EllipsoidProblem<'_> {
    type Params = State;
    type System = DenseSystem;

    fn cost(&self, s: &State) -> f64 {
        self.per_observation(s).iter().map(|r| sq(r).min(self.cap)).sum()
    }

    fn linearize(&self, s: &State) -> DenseSystem {
        let current = self.per_observation(s);
        let active: Vec<usize> = (0..self.obs.len()).filter(|&i| sq(&current[i]) <= self.cap).collect();
        let scale = s.log_axes.map(f64::exp).mean();
        let mut sys = DenseSystem::zeros(9);
        let mut cols: Vec<Vec<Vec<f64>>> = Vec::with_capacity(9);
        for c in 0..9 {
            let h = if c < 3 { FD_STEP * scale } else { FD_STEP };
            let mut d = [0.0; 9];
            d[c] = h;
            let plus = self.per_observation(&s.retract(&d));
            d[c] = -h;
            let minus = self.per_observation(&s.retract(&d));
            // Column c in physical units per unit increment.
            let col = active
                .iter()
                .map(|&i| plus[i].iter().zip(&minus[i]).map(|(p, m)| (p - m) / (2.0 * h)).collect())
                .collect();
            cols.push(col);
        }
        for (a, &i) in active.iter().enumerate() {
            let n = current[i].len();
            for r in 0..n {
                for c in 0..9 {
                    let jc = cols[c][a][r];
                    sys.g[c] += jc * current[i][r];
                    for c2 in 0..9 {
                        sys.h[(c, c2)] += jc * cols[c2][a][r];
                    }
                }
            }
        }
        sys
    }

    fn solve(&self, sys: &DenseSystem, lambda: f64) -> Option<DVector<f64>> {
        sys.solve(lambda)
    }

    fn retract(&self, s: &State, step: &DVector<f64>) -> State {
        s.retract(step.as_slice())
    }
}

fn check_views(obs: &[EllipsoidObservation], k: &Intrinsics) -> Result<(), OptimizeError> {
    if obs.len() < MIN_VIEWS {
        return Err(OptimizeError::TooFewViews(obs.len()));
    }
    let kinv = k.matrix().try_inverse().expect("valid intrinsics");
    let rays: Vec<Vector3<f64>> = obs
        .iter()
        .map(|o| (o.pose.rotation().transpose() * kinv * o.gaussian.mean.push(1.0)).normalize())
        .collect();
    let min_cos = MIN_BASELINE_DEG.to_radians().cos();
    for (i, a) in rays.iter().enumerate() {
        if rays[i + 1..].iter().any(|b| a.dot(b) <= min_cos) {
            return Ok(());
        }
    }
    Err(OptimizeError::DegenerateBaseline)
}

/// Nearest-rank percentile of a non-empty slice.
fn percentile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}

/// Fits an ellipsoid to multi-view ellipse observations by minimizing the
/// summed squared Wasserstein distance with LM and finite-difference
/// Jacobians. After the first five iterations each observation's cost is
/// capped at the 95th percentile of the current per-observation costs.
pub fn estimate_ellipsoid(
    obs: &[EllipsoidObservation],
    k: &Intrinsics,
    init: &EllipsoidParams,
    cfg: &SolverConfig,
    form: WassersteinForm,
) -> Result<EllipsoidEstimate, OptimizeError> {
    check_views(obs, k)?;
    let start = init.to_ellipsoid()?;
    let state = State { center: start.center, log_axes: start.semi_axes.map(f64::ln), rotation: start.rotation };
    let first = SolverConfig { max_iterations: cfg.max_iterations.min(CAP_AFTER), ..*cfg };
    let problem = EllipsoidProblem { obs, k, form, cap: f64::INFINITY };
    let (mut state, mut report) = levenberg_marquardt(&problem, state, &first);
    let mut capped = 0;
    if cfg.max_iterations > CAP_AFTER && !(report.converged && report.final_cost == 0.0) {
        let costs: Vec<f64> = problem.per_observation(&state).iter().map(|r| sq(r)).collect();
        let cap = percentile(&costs, CAP_PERCENTILE);
        let second = SolverConfig { max_iterations: cfg.max_iterations - CAP_AFTER, ..*cfg };
        let capped_problem = EllipsoidProblem { obs, k, form, cap };
        let (s, r) = levenberg_marquardt(&capped_problem, state, &second);
        state = s;
        capped = capped_problem.per_observation(&state).iter().filter(|r| sq(r) > cap).count();
        report.extend(r);
    }
    let ellipsoid = state.ellipsoid().ok_or(OptimizeError::Geometry(crate::geometry::GeometryError::InvalidParameter("ellipsoid")))?;
    let cost = ellipsoid_cost(&ellipsoid, obs, k, form);
    Ok(EllipsoidEstimate { ellipsoid, cost, capped, report })
}

/// Single-view initialization: the ellipse center back-projected to
/// `depth_hint`, isotropic axes `depth_hint · mean(α, β) / f`, identity
/// rotation.
pub fn initialize_ellipsoid(det: &Detection, depth_hint: f64, pose: &Pose, k: &Intrinsics) -> EllipsoidParams {
    let e = det.ellipse;
    let pc = k.backproject(&e.center, depth_hint);
    let center = pose.inverse().transform(&pc);
    let radius = depth_hint * e.semi_axes.mean() / k.mean_focal();
    EllipsoidParams { center, log_axes: Vector3::repeat(radius.ln()), rotation: Vector3::zeros() }
}
