use nalgebra::{DVector, Matrix2x3, Matrix2x6, Matrix3, Matrix3x6, Vector2, Vector3, Vector6};

use super::lm::{levenberg_marquardt, DenseSystem, LmProblem};
use super::{huber_cost, huber_weight, OptimizeError, SolveReport, SolverConfig, CHI2_2DOF_95, CHI2_3DOF_95};
use crate::geometry::{Intrinsics, Pose};

/// Squared residual charged to a point that falls behind the camera.
pub(crate) const BEHIND_PENALTY: f64 = 1e6;
const OUTLIER_ROUNDS: usize = 4;
pub const MIN_POSE_MATCHES: usize = 6;

/// A 2D–3D correspondence, optionally with the measured depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseObservation {
    pub pixel: Vector2<f64>,
    pub point: Vector3<f64>,
    pub depth: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct PoseEstimate {
    pub pose: Pose,
    pub inliers: Vec<bool>,
    pub report: SolveReport,
}

impl PoseEstimate {
    pub fn inlier_count(&self) -> usize {
        self.inliers.iter().filter(|&&b| b).count()
    }
}

/// Observed minus projected pixel; `None` when the point is behind the camera.
pub fn reprojection_residual(pose: &Pose, point: &Vector3<f64>, pixel: &Vector2<f64>, k: &Intrinsics) -> Option<Vector2<f64>> {
    let pc = pose.transform(point);
    (pc.z > 1e-9).then(|| pixel - k.project(&pc))
}

fn projection_derivative(pc: &Vector3<f64>, k: &Intrinsics) -> Matrix2x3<f64> {
    let iz = 1.0 / pc.z;
    let iz2 = iz * iz;
    Matrix2x3::new(k.fx * iz, 0.0, -k.fx * pc.x * iz2, 0.0, k.fy * iz, -k.fy * pc.y * iz2)
}

/// Jacobians of [`reprojection_residual`] with respect to a left pose
/// increment `(ρ, φ)` and to the world point.
pub fn reprojection_jacobian(pose: &Pose, point: &Vector3<f64>, k: &Intrinsics) -> Option<(Matrix2x6<f64>, Matrix2x3<f64>)> {
    let pc = pose.transform(point);
    if pc.z <= 1e-9 {
        return None;
    }
    let d = -projection_derivative(&pc, k);
    let mut dxc = nalgebra::Matrix3x6::zeros();
    dxc.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
    dxc.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-pc.cross_matrix()));
    Some((d * dxc, d * pose.rotation()))
}

/// Observed minus predicted `(u, v, u − bf/z)`; `None` when the point is
/// behind the camera.
pub fn depth_residual(pose: &Pose, point: &Vector3<f64>, pixel: &Vector2<f64>, depth: f64, bf: f64, k: &Intrinsics) -> Option<Vector3<f64>> {
    let pc = pose.transform(point);
    if pc.z <= 1e-9 {
        return None;
    }
    let uv = k.project(&pc);
    Some(Vector3::new(pixel.x - uv.x, pixel.y - uv.y, (pixel.x - bf / depth) - (uv.x - bf / pc.z)))
}

/// Jacobians of [`depth_residual`] with respect to a left pose increment and
/// to the world point.
pub fn depth_jacobian(pose: &Pose, point: &Vector3<f64>, bf: f64, k: &Intrinsics) -> Option<(Matrix3x6<f64>, Matrix3<f64>)> {
    let pc = pose.transform(point);
    if pc.z <= 1e-9 {
        return None;
    }
    let iz = 1.0 / pc.z;
    let iz2 = iz * iz;
    let d = -Matrix3::new(
        k.fx * iz, 0.0, -k.fx * pc.x * iz2,
        0.0, k.fy * iz, -k.fy * pc.y * iz2,
        k.fx * iz, 0.0, -k.fx * pc.x * iz2 + bf * iz2,
    );
    let mut dxc = Matrix3x6::zeros();
    dxc.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
    dxc.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-pc.cross_matrix()));
    Some((d * dxc, d * pose.rotation()))
}

/// One residual term in a uniform 3-row layout; terms without depth carry a
/// zero third row.
pub(crate) struct Term {
    pub r: Vector3<f64>,
    pub jp: Matrix3x6<f64>,
    pub jl: Matrix3<f64>,
}

/// Squared error of a correspondence (behind-camera points are charged
/// [`BEHIND_PENALTY`]) and the Huber width and χ² gate that apply to it.
pub(crate) fn term_error(pose: &Pose, point: &Vector3<f64>, pixel: &Vector2<f64>, depth: Option<f64>, k: &Intrinsics, cfg: &SolverConfig) -> (f64, f64, f64) {
    match depth.filter(|_| cfg.depth_bf > 0.0) {
        Some(d) => (
            depth_residual(pose, point, pixel, d, cfg.depth_bf, k).map_or(BEHIND_PENALTY, |r| r.norm_squared()),
            cfg.huber_delta * (CHI2_3DOF_95 / CHI2_2DOF_95).sqrt(),
            CHI2_3DOF_95,
        ),
        None => (
            reprojection_residual(pose, point, pixel, k).map_or(BEHIND_PENALTY, |r| r.norm_squared()),
            cfg.huber_delta,
            CHI2_2DOF_95,
        ),
    }
}

pub(crate) fn term(pose: &Pose, point: &Vector3<f64>, pixel: &Vector2<f64>, depth: Option<f64>, k: &Intrinsics, cfg: &SolverConfig) -> Option<Term> {
    match depth.filter(|_| cfg.depth_bf > 0.0) {
        Some(d) => {
            let r = depth_residual(pose, point, pixel, d, cfg.depth_bf, k)?;
            let (jp, jl) = depth_jacobian(pose, point, cfg.depth_bf, k)?;
            Some(Term { r, jp, jl })
        }
        None => {
            let r = reprojection_residual(pose, point, pixel, k)?;
            let (jp, jl) = reprojection_jacobian(pose, point, k)?;
            let mut t = Term { r: Vector3::new(r.x, r.y, 0.0), jp: Matrix3x6::zeros(), jl: Matrix3::zeros() };
            t.jp.fixed_view_mut::<2, 6>(0, 0).copy_from(&jp);
            t.jl.fixed_view_mut::<2, 3>(0, 0).copy_from(&jl);
            Some(t)
        }
    }
}

struct PoseProblem<'a> {
    obs: &'a [PoseObservation],
    active: &'a [bool],
    k: &'a Intrinsics,
    cfg: &'a SolverConfig,
}

impl LmProblem for PoseProblem<'_> {
    type Params = Pose;
    type System = DenseSystem;

    fn cost(&self, pose: &Pose) -> f64 {
        self.obs
            .iter()
            .zip(self.active)
            .filter(|(_, &a)| a)
            .map(|(o, _)| {
                let (s, delta, _) = term_error(pose, &o.point, &o.pixel, o.depth, self.k, self.cfg);
                huber_cost(s, delta)
            })
            .sum()
    }

    fn linearize(&self, pose: &Pose) -> DenseSystem {
        let mut sys = DenseSystem::zeros(6);
        for (o, _) in self.obs.iter().zip(self.active).filter(|(_, &a)| a) {
            let Some(t) = term(pose, &o.point, &o.pixel, o.depth, self.k, self.cfg) else { continue };
            let (s, delta, _) = term_error(pose, &o.point, &o.pixel, o.depth, self.k, self.cfg);
            let w = huber_weight(s, delta);
            sys.h += w * t.jp.transpose() * t.jp;
            sys.g += w * t.jp.transpose() * t.r;
        }
        sys
    }

    fn solve(&self, sys: &DenseSystem, lambda: f64) -> Option<DVector<f64>> {
        sys.solve(lambda)
    }

    fn retract(&self, pose: &Pose, step: &DVector<f64>) -> Pose {
        pose.retract_left(&Vector6::from_column_slice(step.as_slice()))
    }
}

/// Refines a camera pose from 2D–3D matches with a Huber kernel, alternating
/// optimization and χ² outlier classification for four rounds.
pub fn optimize_pose(
    initial: &Pose,
    obs: &[PoseObservation],
    k: &Intrinsics,
    cfg: &SolverConfig,
) -> Result<PoseEstimate, OptimizeError> {
    if obs.len() < MIN_POSE_MATCHES {
        return Err(OptimizeError::TooFewMatches { needed: MIN_POSE_MATCHES, got: obs.len() });
    }
    let mut pose = *initial;
    let mut inliers = vec![true; obs.len()];
    let mut report = SolveReport::default();
    for _ in 0..OUTLIER_ROUNDS {
        if inliers.iter().filter(|&&b| b).count() < MIN_POSE_MATCHES / 2 {
            break;
        }
        let problem = PoseProblem { obs, active: &inliers, k, cfg };
        let (p, r) = levenberg_marquardt(&problem, pose, cfg);
        pose = p;
        report.extend(r);
        for (flag, o) in inliers.iter_mut().zip(obs) {
            let (s, _, gate) = term_error(&pose, &o.point, &o.pixel, o.depth, k, cfg);
            *flag = s <= gate;
        }
    }
    Ok(PoseEstimate { pose, inliers, report })
}
