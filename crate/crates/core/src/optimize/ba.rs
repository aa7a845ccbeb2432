use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector, Matrix3, Matrix6x3, Vector2, Vector3, Vector6};

use super::lm::{levenberg_marquardt, LmProblem};
use super::pose::{term, term_error};
use super::{huber_cost, huber_weight, SolveReport, SolverConfig};
use crate::geometry::{Intrinsics, Pose};
use crate::map::{KeyFrameId, LocalMap, Map, MapPointId};

/// One reprojection term of bundle adjustment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaEdge {
    pub keyframe: KeyFrameId,
    pub point: MapPointId,
    pub pixel: Vector2<f64>,
    /// Measured depth of the keypoint, if any.
    pub depth: Option<f64>,
}

/// A self-contained bundle adjustment problem.
#[derive(Debug, Clone, Default)]
pub struct BaProblem {
    pub poses: BTreeMap<KeyFrameId, Pose>,
    /// Keyframes whose poses stay constant.
    pub fixed: BTreeSet<KeyFrameId>,
    pub points: BTreeMap<MapPointId, Vector3<f64>>,
    pub edges: Vec<BaEdge>,
}

#[derive(Debug, Clone)]
pub struct BaSolution {
    pub poses: BTreeMap<KeyFrameId, Pose>,
    pub points: BTreeMap<MapPointId, Vector3<f64>>,
    /// Indices of edges classified as outliers after the final round.
    pub outliers: Vec<usize>,
    pub report: SolveReport,
}

#[derive(Debug, Clone, Default)]
pub struct BaReport {
    pub solve: SolveReport,
    pub free_keyframes: usize,
    pub fixed_keyframes: usize,
    pub points: usize,
    pub edges: usize,
    pub removed_observations: usize,
}

#[derive(Clone)]
struct State {
    poses: Vec<Pose>,
    points: Vec<Vector3<f64>>,
}

struct Indexed<'a> {
    /// Pose slot → position among free poses (None when fixed).
    free: Vec<Option<usize>>,
    n_free: usize,
    edges: Vec<Slotted>,
    active: &'a [bool],
    k: &'a Intrinsics,
    cfg: &'a SolverConfig,
}

/// An edge with pose and point slots in place of ids.
#[derive(Clone, Copy)]
struct Slotted {
    pose: usize,
    point: usize,
    pixel: Vector2<f64>,
    depth: Option<f64>,
}

struct SchurSystem {
    hpp: DMatrix<f64>,
    gp: DVector<f64>,
    hll: Vec<Matrix3<f64>>,
    gl: Vec<Vector3<f64>>,
    /// Per point: (free pose index, W block).
    hpl: Vec<Vec<(usize, Matrix6x3<f64>)>>,
}

impl LmProblem for Indexed<'_> {
    type Params = State;
    type System = SchurSystem;

    fn cost(&self, s: &State) -> f64 {
        self.edges
            .iter()
            .zip(self.active)
            .filter(|(_, &a)| a)
            .map(|(e, _)| {
                let (sq, delta, _) = term_error(&s.poses[e.pose], &s.points[e.point], &e.pixel, e.depth, self.k, self.cfg);
                huber_cost(sq, delta)
            })
            .sum()
    }

    fn linearize(&self, s: &State) -> SchurSystem {
        let np = self.n_free;
        let nl = s.points.len();
        let mut sys = SchurSystem {
            hpp: DMatrix::zeros(6 * np, 6 * np),
            gp: DVector::zeros(6 * np),
            hll: vec![Matrix3::zeros(); nl],
            gl: vec![Vector3::zeros(); nl],
            hpl: vec![Vec::new(); nl],
        };
        for (e, _) in self.edges.iter().zip(self.active).filter(|(_, &a)| a) {
            let (p, l) = (e.pose, e.point);
            let Some(t) = term(&s.poses[p], &s.points[l], &e.pixel, e.depth, self.k, self.cfg) else { continue };
            let (r, jp, jl) = (t.r, t.jp, t.jl);
            let (sq, delta, _) = term_error(&s.poses[p], &s.points[l], &e.pixel, e.depth, self.k, self.cfg);
            let w = huber_weight(sq, delta);
            sys.hll[l] += w * jl.transpose() * jl;
            sys.gl[l] += w * jl.transpose() * r;
            if let Some(i) = self.free[p] {
                let mut blk = sys.hpp.fixed_view_mut::<6, 6>(6 * i, 6 * i);
                blk += w * jp.transpose() * jp;
                let mut g = sys.gp.fixed_rows_mut::<6>(6 * i);
                g += w * jp.transpose() * r;
                sys.hpl[l].push((i, w * jp.transpose() * jl));
            }
        }
        sys
    }

    fn solve(&self, sys: &SchurSystem, lambda: f64) -> Option<DVector<f64>> {
        let np = self.n_free;
        let nl = sys.hll.len();
        let mut s = sys.hpp.clone();
        for i in 0..6 * np {
            s[(i, i)] += lambda * sys.hpp[(i, i)].max(1e-12);
        }
        let mut rhs = -&sys.gp;
        let mut hll_inv = Vec::with_capacity(nl);
        for l in 0..nl {
            let mut h = sys.hll[l];
            for d in 0..3 {
                h[(d, d)] += lambda * sys.hll[l][(d, d)].max(1e-12);
            }
            let inv = h.try_inverse()?;
            for &(a, wa) in &sys.hpl[l] {
                let wa_inv = wa * inv;
                let mut r = rhs.fixed_rows_mut::<6>(6 * a);
                r += wa_inv * sys.gl[l];
                for &(b, wb) in &sys.hpl[l] {
                    let mut blk = s.fixed_view_mut::<6, 6>(6 * a, 6 * b);
                    blk -= wa_inv * wb.transpose();
                }
            }
            hll_inv.push(inv);
        }
        let dp = if np > 0 { s.cholesky()?.solve(&rhs) } else { DVector::zeros(0) };
        let mut step = DVector::zeros(6 * np + 3 * nl);
        step.rows_mut(0, 6 * np).copy_from(&dp);
        for l in 0..nl {
            let mut b = -sys.gl[l];
            for &(a, wa) in &sys.hpl[l] {
                b -= wa.transpose() * dp.fixed_rows::<6>(6 * a);
            }
            step.fixed_rows_mut::<3>(6 * np + 3 * l).copy_from(&(hll_inv[l] * b));
        }
        step.iter().all(|v| v.is_finite()).then_some(step)
    }

    fn retract(&self, s: &State, step: &DVector<f64>) -> State {
        let mut out = s.clone();
        for (slot, free) in self.free.iter().enumerate() {
            if let Some(i) = free {
                out.poses[slot] = s.poses[slot].retract_left(&Vector6::from_column_slice(&step.as_slice()[6 * i..6 * i + 6]));
            }
        }
        let off = 6 * self.n_free;
        for (l, p) in out.points.iter_mut().enumerate() {
            *p += Vector3::from_column_slice(&step.as_slice()[off + 3 * l..off + 3 * l + 3]);
        }
        out
    }
}

fn classify(state: &State, edges: &[Slotted], k: &Intrinsics, cfg: &SolverConfig) -> Vec<bool> {
    edges
        .iter()
        .map(|e| {
            let (sq, _, gate) = term_error(&state.poses[e.pose], &state.points[e.point], &e.pixel, e.depth, k, cfg);
            sq <= gate
        })
        .collect()
}

/// Two rounds of robust LM over free poses and all points; edges that are
/// outliers after the first round are excluded from the second.
pub fn bundle_adjust(problem: &BaProblem, k: &Intrinsics, cfg: &SolverConfig) -> BaSolution {
    let pose_ids: Vec<KeyFrameId> = problem.poses.keys().copied().collect();
    let point_ids: Vec<MapPointId> = problem.points.keys().copied().collect();
    let pose_slot: BTreeMap<KeyFrameId, usize> = pose_ids.iter().enumerate().map(|(i, &k)| (k, i)).collect();
    let point_slot: BTreeMap<MapPointId, usize> = point_ids.iter().enumerate().map(|(i, &p)| (p, i)).collect();
    let mut n_free = 0;
    let free = pose_ids
        .iter()
        .map(|id| {
            (!problem.fixed.contains(id)).then(|| {
                n_free += 1;
                n_free - 1
            })
        })
        .collect();
    let edges: Vec<_> = problem
        .edges
        .iter()
        .filter_map(|e| Some(Slotted { pose: *pose_slot.get(&e.keyframe)?, point: *point_slot.get(&e.point)?, pixel: e.pixel, depth: e.depth }))
        .collect();
    let mut state = State {
        poses: pose_ids.iter().map(|id| problem.poses[id]).collect(),
        points: point_ids.iter().map(|id| problem.points[id]).collect(),
    };
    let mut active = vec![true; edges.len()];
    let mut report = SolveReport::default();
    for _ in 0..2 {
        let indexed = Indexed { free: Vec::clone(&free), n_free, edges: edges.clone(), active: &active, k, cfg };
        let (s, r) = levenberg_marquardt(&indexed, state, cfg);
        state = s;
        report.extend(r);
        active = classify(&state, &edges, k, cfg);
    }
    // Edges referencing unknown entities are reported as outliers too.
    let mut outliers = Vec::new();
    let mut it = active.iter();
    for (i, e) in problem.edges.iter().enumerate() {
        let known = pose_slot.contains_key(&e.keyframe) && point_slot.contains_key(&e.point);
        if !known || !*it.next().expect("one flag per known edge") {
            outliers.push(i);
        }
    }
    BaSolution {
        poses: pose_ids.into_iter().zip(state.poses).collect(),
        points: point_ids.into_iter().zip(state.points).collect(),
        outliers,
        report,
    }
}

/// Local bundle adjustment over the window returned by
/// [`Map::local_map_for_frame`]. Only points seen by at least two keyframes
/// take part. The map's first keyframe is always held fixed. Outlier
/// observations are removed from the map afterward. Objects are never
/// touched.
pub fn local_bundle_adjustment(map: &mut Map, local: &LocalMap, k: &Intrinsics, cfg: &SolverConfig) -> BaReport {
    let mut problem = BaProblem::default();
    let mut fixed: BTreeSet<KeyFrameId> = local.fixed.iter().copied().collect();
    if let Some(first) = map.first_keyframe() {
        fixed.insert(first);
    }
    for pid in &local.points {
        let Some(p) = map.point(*pid) else { continue };
        if p.observations.len() < 2 {
            continue;
        }
        problem.points.insert(*pid, p.position);
        for (&kf, &idx) in &p.observations {
            let frame = map.keyframe(kf).expect("observation references a keyframe");
            problem.poses.entry(kf).or_insert(frame.pose);
            let kp = &frame.keypoints[idx];
            problem.edges.push(BaEdge { keyframe: kf, point: *pid, pixel: kp.pixel, depth: kp.depth });
        }
    }
    for kf in &local.keyframes {
        if let Some(f) = map.keyframe(*kf) {
            problem.poses.entry(*kf).or_insert(f.pose);
        }
    }
    problem.fixed = problem.poses.keys().filter(|k| fixed.contains(k) || !local.keyframes.contains(k)).copied().collect();
    if problem.fixed.is_empty() {
        // No anchor anywhere: hold the oldest keyframe of the window.
        if let Some(&oldest) = problem.poses.keys().next() {
            problem.fixed.insert(oldest);
        }
    }
    let solution = bundle_adjust(&problem, k, cfg);
    for (kf, pose) in &solution.poses {
        if !problem.fixed.contains(kf) {
            map.set_keyframe_pose(*kf, *pose).expect("keyframe exists");
        }
    }
    for (pid, pos) in &solution.points {
        map.set_point_position(*pid, *pos).expect("point exists");
    }
    for &i in &solution.outliers {
        let e = problem.edges[i];
        map.remove_point_observation(e.point, e.keyframe).expect("point exists");
    }
    BaReport {
        free_keyframes: problem.poses.len() - problem.fixed.len(),
        fixed_keyframes: problem.fixed.len(),
        points: problem.points.len(),
        edges: problem.edges.len(),
        removed_observations: solution.outliers.len(),
        solve: solution.report,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{Descriptor, Keypoint};
    use crate::geometry::Ellipsoid;
    use crate::map::{KeyFrame, LocalMapOptions};
    use nalgebra::UnitQuaternion;
    use crate::optimize::pose::{depth_jacobian, depth_residual, reprojection_jacobian, reprojection_residual};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cam() -> Intrinsics {
        Intrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap()
    }

    /// Cameras on an arc looking at the origin.
    fn truth_poses(n: usize) -> Vec<Pose> {
        (0..n)
            .map(|i| {
                let a = -0.3 + 0.6 * i as f64 / (n - 1).max(1) as f64;
                let c = Vector3::new(6.0 * a.sin(), 0.0, -6.0 * a.cos());
                let fwd = (-c).normalize();
                let right = Vector3::y().cross(&fwd).normalize();
                let down = fwd.cross(&right);
                let wfc = Matrix3::from_columns(&[right, down, fwd]);
                Pose::from_camera_center(&wfc, &c)
            })
            .collect()
    }

    fn build_map(
        rng: &mut ChaCha8Rng,
        poses: &[Pose],
        noise: f64,
        n_points: usize,
        corrupt: Option<(usize, usize)>,
    ) -> (Map, Vec<Vector3<f64>>) {
        let k = cam();
        let pts: Vec<Vector3<f64>> = (0..n_points)
            .map(|_| Vector3::new(rng.random_range(-1.5..1.5), rng.random_range(-1.0..1.0), rng.random_range(-1.5..1.5)))
            .collect();
        let mut map = Map::new();
        map.add_object(Ellipsoid::sphere(Vector3::zeros(), 0.5).unwrap(), 1);
        for (i, truth) in poses.iter().enumerate() {
            let kps = pts
                .iter()
                .enumerate()
                .map(|(j, p)| {
                    let mut pixel = k.project(&truth.transform(p));
                    if corrupt == Some((i, j)) {
                        pixel += Vector2::new(40.0, -30.0);
                    }
                    Keypoint { pixel, descriptor: Descriptor::default(), depth: None }
                })
                .collect();
            let pose = if i == 0 {
                *truth
            } else {
                truth.retract_left(&Vector6::from_fn(|_, _| rng.random_range(-noise..noise)))
            };
            map.insert_keyframe(KeyFrame::new(KeyFrameId(i as u64), i as f64, pose, kps, vec![])).unwrap();
        }
        for (j, p) in pts.iter().enumerate() {
            let noisy = p + Vector3::from_fn(|_, _| rng.random_range(-noise..noise));
            let pid = map.add_map_point(noisy, Descriptor::default(), KeyFrameId(0), j).unwrap();
            for i in 1..poses.len() {
                map.add_point_observation(pid, KeyFrameId(i as u64), j).unwrap();
            }
        }
        (map, pts)
    }

    #[test]
    fn recovers_perturbed_window_and_keeps_gauge() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let truth = truth_poses(5);
        let (mut map, pts) = build_map(&mut rng, &truth, 0.01, 60, None);
        let object_before = map.objects().values().next().unwrap().ellipsoid;
        let first_before = map.keyframe(KeyFrameId(0)).unwrap().pose;
        let local = map.local_map_for_frame(KeyFrameId(4), &LocalMapOptions::default()).unwrap();
        assert_eq!(local.keyframes.len(), 5);
        let cfg = SolverConfig { max_iterations: 20, ..SolverConfig::bundle() };
        let report = local_bundle_adjustment(&mut map, &local, &cam(), &cfg);
        assert!(report.solve.is_monotone());
        assert_eq!(report.removed_observations, 0);
        assert_eq!(map.keyframe(KeyFrameId(0)).unwrap().pose, first_before);
        assert_eq!(map.objects().values().next().unwrap().ellipsoid, object_before);
        // Monocular BA with one fixed camera leaves scale free; compare
        // reprojection instead of raw positions.
        assert!(report.solve.final_cost < 1e-6 * report.solve.initial_cost, "{report:?}");
        for (j, p) in pts.iter().enumerate() {
            let est = map.point(MapPointId(j as u64)).unwrap().position;
            assert!((est - p).norm() < 0.05, "point {j}");
        }
    }

    #[test]
    fn fixed_keyframes_are_bit_identical_and_outliers_removed() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let truth = truth_poses(6);
        let (mut map, _) = build_map(&mut rng, &truth, 0.002, 40, Some((3, 0)));
        let pid = *map.points().keys().next().unwrap();
        let local = LocalMap {
            keyframes: vec![KeyFrameId(2), KeyFrameId(3), KeyFrameId(4), KeyFrameId(5)],
            points: map.points().keys().copied().collect(),
            fixed: vec![KeyFrameId(0), KeyFrameId(1)],
        };
        let before: Vec<Pose> = (0..2).map(|i| map.keyframe(KeyFrameId(i)).unwrap().pose).collect();
        let report = local_bundle_adjustment(&mut map, &local, &cam(), &SolverConfig::bundle());
        for (i, b) in before.iter().enumerate() {
            assert_eq!(map.keyframe(KeyFrameId(i as u64)).unwrap().pose, *b);
        }
        assert_eq!(report.fixed_keyframes, 2);
        assert!(report.removed_observations >= 1);
        assert!(!map.point(pid).unwrap().observations.contains_key(&KeyFrameId(3)));
        assert!(report.solve.is_monotone());
        assert!(map.audit().is_clean());
    }

    #[test]
    fn schur_step_matches_dense_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let k = cam();
        let truth = truth_poses(3);
        let mut problem = BaProblem::default();
        for (i, p) in truth.iter().enumerate() {
            let q = UnitQuaternion::from_scaled_axis(Vector3::new(0.01, -0.02, 0.005) * i as f64);
            problem.poses.insert(KeyFrameId(i as u64), Pose::from_quaternion(&(q * p.quaternion()), p.translation() + Vector3::x() * 0.01 * i as f64));
        }
        problem.fixed.insert(KeyFrameId(0));
        for j in 0..8 {
            let x = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            problem.points.insert(MapPointId(j), x + Vector3::repeat(0.01));
            for (i, p) in truth.iter().enumerate() {
                let pc = p.transform(&x);
                problem.edges.push(BaEdge { keyframe: KeyFrameId(i as u64), point: MapPointId(j), pixel: k.project(&pc), depth: (j % 2 == 0).then_some(pc.z) });
            }
        }
        let edges: Vec<_> = problem
            .edges
            .iter()
            .map(|e| Slotted { pose: e.keyframe.0 as usize, point: e.point.0 as usize, pixel: e.pixel, depth: e.depth })
            .collect();
        let active = vec![true; edges.len()];
        let cfg = SolverConfig { huber_delta: 1e9, ..SolverConfig::bundle() }.with_depth(40.0);
        let idx = Indexed { free: vec![None, Some(0), Some(1)], n_free: 2, edges: edges.clone(), active: &active, k: &k, cfg: &cfg };
        let state = State { poses: problem.poses.values().copied().collect(), points: problem.points.values().copied().collect() };
        let sys = idx.linearize(&state);
        let lambda = 1e-3;
        let schur = idx.solve(&sys, lambda).unwrap();
        // Dense reference: assemble the full Hessian from per-edge Jacobians.
        let n = 12 + 24;
        let mut h = DMatrix::zeros(n, n);
        let mut g = DVector::zeros(n);
        for e in &edges {
            let (p, l) = (e.pose, e.point);
            let (r, jp, jl) = match e.depth {
                Some(d) => {
                    let r = depth_residual(&state.poses[p], &state.points[l], &e.pixel, d, 40.0, &k).unwrap();
                    let (jp, jl) = depth_jacobian(&state.poses[p], &state.points[l], 40.0, &k).unwrap();
                    (DVector::from_column_slice(r.as_slice()), DMatrix::from_column_slice(3, 6, jp.as_slice()), DMatrix::from_column_slice(3, 3, jl.as_slice()))
                }
                None => {
                    let r = reprojection_residual(&state.poses[p], &state.points[l], &e.pixel, &k).unwrap();
                    let (jp, jl) = reprojection_jacobian(&state.poses[p], &state.points[l], &k).unwrap();
                    (DVector::from_column_slice(r.as_slice()), DMatrix::from_column_slice(2, 6, jp.as_slice()), DMatrix::from_column_slice(2, 3, jl.as_slice()))
                }
            };
            let rows = r.len();
            let mut j = DMatrix::zeros(rows, n);
            if p > 0 {
                j.view_mut((0, 6 * (p - 1)), (rows, 6)).copy_from(&jp);
            }
            j.view_mut((0, 12 + 3 * l), (rows, 3)).copy_from(&jl);
            h += j.transpose() * &j;
            g += j.transpose() * r;
        }
        for i in 0..n {
            h[(i, i)] += lambda * h[(i, i)];
        }
        let dense = h.cholesky().unwrap().solve(&(-g));
        assert!((schur - &dense).amax() < 1e-9 * dense.amax().max(1.0));
    }
}
