//! Object-landmark bookkeeping shared by the mapping stage and the
//! association benchmark: keyframe association, candidate hysteresis before
//! a landmark is created, and multi-view ellipsoid re-estimation.

use nalgebra::Vector3;

use crate::association::{associate_objects, AssociationConfig, ObjectAssociation};
use crate::features::Detection;
use crate::geometry::{ellipse_to_gaussian, Ellipsoid, Intrinsics, Pose};
use crate::map::{KeyFrameId, Map, MapError, ObjectId};
use crate::optimize::{
    ellipsoid_cost, estimate_ellipsoid, initialize_ellipsoid, EllipsoidObservation, EllipsoidParams, SolveReport,
    SolverConfig,
};

/// An unmatched detection track waiting for enough keyframes to become an
/// object landmark.
#[derive(Debug, Clone, PartialEq)]
struct Candidate {
    observations: Vec<(KeyFrameId, usize)>,
    centers: Vec<Vector3<f64>>,
    radii: Vec<f64>,
    last_seen: KeyFrameId,
}

impl Candidate {
    fn center(&self) -> Vector3<f64> {
        self.centers.iter().sum::<Vector3<f64>>() / self.centers.len() as f64
    }

    fn radius(&self) -> f64 {
        self.radii.iter().sum::<f64>() / self.radii.len() as f64
    }
}

/// Median depth of the keypoints inside a detection, if any carry depth.
pub(crate) fn detection_depth(det: &Detection, keypoints: &[crate::features::Keypoint]) -> Option<f64> {
    let mut depths: Vec<f64> = det.keypoint_indices.iter().filter_map(|&i| keypoints.get(i).and_then(|k| k.depth)).collect();
    if depths.is_empty() {
        return None;
    }
    depths.sort_by(f64::total_cmp);
    Some(depths[depths.len() / 2])
}

/// Single-view ellipsoid guess for a detection: the measured depth is taken
/// at the front surface, so the center is pushed back by the estimated radius.
pub(crate) fn single_view_guess(det: &Detection, front_depth: f64, pose: &Pose, k: &Intrinsics) -> EllipsoidParams {
    let radius = front_depth * det.ellipse.semi_axes.mean() / k.mean_focal();
    initialize_ellipsoid(det, front_depth + radius, pose, k)
}

/// Tracks unmatched detections across keyframes; a candidate matched by
/// mutually consistent back-projections in `n_init` keyframes is promoted.
#[derive(Debug, Clone, Default)]
pub struct CandidateTracker {
    candidates: Vec<Candidate>,
}

impl CandidateTracker {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

/// Report of the object work done for one keyframe.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ObjectUpdate {
    pub created: Vec<ObjectId>,
    pub reoptimized: Vec<ObjectId>,
    pub reports: Vec<(ObjectId, SolveReport)>,
}

#[derive(Debug, Clone)]
pub struct ObjectMapper {
    pub association: AssociationConfig,
    pub solver: SolverConfig,
    pub n_init: usize,
    pub candidate_expiry: u64,
    pub max_views: usize,
    pub reoptimize: bool,
    candidates: CandidateTracker,
}

impl ObjectMapper {
    pub fn new(association: AssociationConfig, solver: SolverConfig, n_init: usize, candidate_expiry: u64, max_views: usize) -> Self {
        Self { association, solver, n_init, candidate_expiry, max_views, reoptimize: true, candidates: CandidateTracker::default() }
    }

    pub fn candidates(&self) -> &CandidateTracker {
        &self.candidates
    }

    /// Associates the detections of a stored keyframe against all object
    /// landmarks and records the matches as observations.
    pub fn associate_keyframe(&self, map: &mut Map, kf: KeyFrameId, k: &Intrinsics) -> Result<ObjectAssociation, MapError> {
        let frame = map.keyframe(kf).ok_or(MapError::UnknownKeyFrame(kf))?;
        let assoc = associate_objects(&frame.detections, map.objects().values(), &frame.pose, k, &self.association);
        for m in &assoc.matches {
            map.add_object_observation(m.object_id, kf, m.detection_index)?;
        }
        Ok(assoc)
    }

    /// Detections of `kf` eligible for association that no object claims.
    pub fn unmatched_detections(&self, map: &Map, kf: KeyFrameId) -> Vec<usize> {
        let Some(frame) = map.keyframe(kf) else { return Vec::new() };
        let claimed: std::collections::BTreeSet<usize> = frame.observed_objects.values().copied().collect();
        (0..frame.detections.len())
            .filter(|i| !claimed.contains(i) && frame.detections[*i].border_fraction <= self.association.max_border_fraction)
            .collect()
    }

    /// Feeds the unmatched detections of `kf` to the candidate tracker and
    /// promotes candidates that reached `n_init` keyframes. Returns the ids
    /// of new landmarks.
    pub fn update_candidates(&mut self, map: &mut Map, kf: KeyFrameId, unmatched: &[usize], k: &Intrinsics) -> Result<Vec<ObjectId>, MapError> {
        let frame = map.keyframe(kf).ok_or(MapError::UnknownKeyFrame(kf))?;
        let expiry = self.candidate_expiry;
        self.candidates.candidates.retain(|c| kf.0.saturating_sub(c.last_seen.0) <= expiry);

        let mut guesses = Vec::new();
        for &d in unmatched {
            let det = &frame.detections[d];
            let Some(depth) = detection_depth(det, &frame.keypoints) else { continue };
            let g = single_view_guess(det, depth, &frame.pose, k);
            guesses.push((d, g.center, g.log_axes.x.exp()));
        }
        // Greedy nearest pairing between this keyframe's guesses and the
        // live candidates.
        let mut pairs = Vec::new();
        for (gi, (_, c, r)) in guesses.iter().enumerate() {
            for (ci, cand) in self.candidates.candidates.iter().enumerate() {
                if cand.last_seen == kf {
                    continue;
                }
                let dist = (cand.center() - c).norm();
                if dist <= r.max(cand.radius()) {
                    pairs.push((dist, gi, ci));
                }
            }
        }
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut guess_used = vec![false; guesses.len()];
        let mut cand_used = vec![false; self.candidates.candidates.len()];
        for (_, gi, ci) in pairs {
            if guess_used[gi] || cand_used[ci] {
                continue;
            }
            guess_used[gi] = true;
            cand_used[ci] = true;
            let (d, c, r) = guesses[gi];
            let cand = &mut self.candidates.candidates[ci];
            cand.observations.push((kf, d));
            cand.centers.push(c);
            cand.radii.push(r);
            cand.last_seen = kf;
        }
        for (gi, (d, c, r)) in guesses.into_iter().enumerate() {
            if !guess_used[gi] {
                self.candidates.candidates.push(Candidate { observations: vec![(kf, d)], centers: vec![c], radii: vec![r], last_seen: kf });
            }
        }

        let n_init = self.n_init;
        let (ready, pending): (Vec<_>, Vec<_>) =
            std::mem::take(&mut self.candidates.candidates).into_iter().partition(|c| c.observations.len() >= n_init);
        self.candidates.candidates = pending;
        let mut created = Vec::new();
        for cand in ready {
            let Ok(sphere) = Ellipsoid::sphere(cand.center(), cand.radius()) else { continue };
            let (okf, od) = cand.observations[cand.observations.len() - 1];
            let category = map.keyframe(okf).map(|f| f.detections[od].category).unwrap_or(0);
            let oid = map.add_object(sphere, category);
            for (okf, od) in &cand.observations {
                map.add_object_observation(oid, *okf, *od)?;
            }
            self.refine_object(map, oid, k);
            created.push(oid);
        }
        Ok(created)
    }

    /// Gathers up to `max_views` evenly spaced observations of an object.
    pub fn observations(&self, map: &Map, oid: ObjectId) -> Vec<EllipsoidObservation> {
        let Some(obj) = map.object(oid) else { return Vec::new() };
        let all: Vec<EllipsoidObservation> = obj
            .observations
            .iter()
            .filter_map(|(kf, &det)| {
                let frame = map.keyframe(*kf)?;
                let e = frame.detections.get(det)?.observation_ellipse(self.association.observation_model);
                Some(EllipsoidObservation { gaussian: ellipse_to_gaussian(&e), pose: frame.pose })
            })
            .collect();
        let n = all.len();
        if n <= self.max_views {
            return all;
        }
        (0..self.max_views).map(|i| all[i * n / self.max_views].clone()).collect()
    }

    /// Re-estimates an object's ellipsoid from its observations, keeping the
    /// result only if the cost does not increase. Returns the solver report
    /// when an estimate was accepted.
    pub fn refine_object(&self, map: &mut Map, oid: ObjectId, k: &Intrinsics) -> Option<SolveReport> {
        if !self.reoptimize {
            return None;
        }
        let obs = self.observations(map, oid);
        let current = map.object(oid)?.ellipsoid;
        let form = self.association.metric.wasserstein_form;
        let est = estimate_ellipsoid(&obs, k, &EllipsoidParams::from_ellipsoid(&current), &self.solver, form).ok()?;
        let before = ellipsoid_cost(&current, &obs, k, form);
        if est.cost <= before && est.cost.is_finite() {
            map.set_object_ellipsoid(oid, est.ellipsoid).ok()?;
            Some(est.report)
        } else {
            None
        }
    }

    /// Re-estimates every object observed by `kf`, in id order.
    pub fn refine_observed(&self, map: &mut Map, kf: KeyFrameId, k: &Intrinsics, skip: &[ObjectId]) -> Vec<(ObjectId, SolveReport)> {
        let observed: Vec<ObjectId> = map
            .keyframe(kf)
            .map(|f| f.observed_objects.keys().copied().filter(|o| !skip.contains(o)).collect())
            .unwrap_or_default();
        observed.into_iter().filter_map(|oid| self.refine_object(map, oid, k).map(|r| (oid, r))).collect()
    }

    /// Association (optional), candidate update and re-estimation of the
    /// objects observed by `kf`.
    pub fn process_keyframe(&mut self, map: &mut Map, kf: KeyFrameId, k: &Intrinsics, associate: bool) -> Result<ObjectUpdate, MapError> {
        let created = self.associate_and_spawn(map, kf, k, associate)?;
        let reports = self.refine_observed(map, kf, k, &created);
        Ok(ObjectUpdate { created, reoptimized: reports.iter().map(|r| r.0).collect(), reports })
    }

    /// Association (optional) followed by the candidate update.
    pub fn associate_and_spawn(&mut self, map: &mut Map, kf: KeyFrameId, k: &Intrinsics, associate: bool) -> Result<Vec<ObjectId>, MapError> {
        if associate {
            self.associate_keyframe(map, kf, k)?;
        }
        let unmatched = self.unmatched_detections(map, kf);
        self.update_candidates(map, kf, &unmatched, k)
    }
}
