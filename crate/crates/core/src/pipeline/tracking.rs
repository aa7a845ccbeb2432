//! Odometry front end: coarse-to-fine pose estimation for each frame.

use std::collections::{BTreeMap, BTreeSet};

use crate::association::{
    associate_map_points_via_objects, associate_objects, match_local_map, AssociationConfig, PointMatch,
};
use crate::geometry::{Intrinsics, Pose};
use crate::map::{KeyFrame, KeyFrameId, Map, MapPointId};
use crate::optimize::{optimize_pose, PoseEstimate, PoseObservation, SolveReport, MIN_POSE_MATCHES};

use super::{keyframe_decision, predict_pose, Frame, PipelineConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("tracking lost at frame {frame} ({matches} matches)")]
pub struct TrackingLost {
    pub frame: u64,
    pub matches: usize,
}

/// Call counters used to check which code paths a configuration exercises.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TrackingAudit {
    pub object_associations: usize,
    pub object_aided_matchings: usize,
    pub projection_searches: usize,
}

#[derive(Debug, Clone)]
pub struct TrackOutcome {
    pub pose: Pose,
    pub stage1_pose: Option<Pose>,
    /// Keyframe to insert into the map before mapping runs.
    pub keyframe: Option<KeyFrame>,
    /// Keyframe this frame's pose is expressed against.
    pub reference: KeyFrameId,
    /// `pose ∘ reference⁻¹` at tracking time.
    pub relative: Pose,
    pub stage1_matches: usize,
    pub stage1_inliers: usize,
    pub stage2_matches: usize,
    pub inliers: usize,
    pub solves: Vec<(&'static str, SolveReport)>,
}

pub struct Tracker {
    cfg: PipelineConfig,
    association: AssociationConfig,
    k: Intrinsics,
    /// Up to two most recent tracked poses, oldest first.
    history: Vec<Pose>,
    last_matches: Vec<MapPointId>,
    last_relative: Option<(KeyFrameId, Pose)>,
    reference: Option<KeyFrameId>,
    frames_since_keyframe: usize,
    next_keyframe: u64,
    pub audit: TrackingAudit,
}

impl Tracker {
    pub fn new(cfg: &PipelineConfig, k: Intrinsics) -> Self {
        Self {
            cfg: *cfg,
            association: cfg.effective_association(),
            k,
            history: Vec::new(),
            last_matches: Vec::new(),
            last_relative: None,
            reference: None,
            frames_since_keyframe: 0,
            next_keyframe: 0,
            audit: TrackingAudit::default(),
        }
    }

    /// Pose of the previous frame re-expressed through its reference
    /// keyframe, so that mapping corrections carry forward.
    fn last_pose(&self, map: &Map) -> Option<Pose> {
        if let Some((kf, rel)) = self.last_relative {
            if let Some(f) = map.keyframe(kf) {
                return Some(rel.compose(&f.pose));
            }
        }
        self.history.last().copied()
    }

    fn predict(&self, map: &Map) -> Pose {
        let Some(last) = self.last_pose(map) else { return Pose::identity() };
        if self.history.len() < 2 {
            return last;
        }
        let tracked_last = self.history[self.history.len() - 1];
        let motion = predict_pose(&self.history).compose(&tracked_last.inverse());
        motion.compose(&last).renormalized()
    }

    fn observations(matches: &[PointMatch], frame: &Frame, map: &Map) -> Vec<PoseObservation> {
        matches
            .iter()
            .map(|m| {
                let kp = &frame.keypoints[m.keypoint_index];
                PoseObservation {
                    pixel: kp.pixel,
                    point: map.point(m.map_point_id).expect("matched point exists").position,
                    depth: kp.depth,
                }
            })
            .collect()
    }

    fn refine(&self, initial: &Pose, matches: &[PointMatch], frame: &Frame, map: &Map) -> Option<PoseEstimate> {
        optimize_pose(initial, &Self::observations(matches, frame, map), &self.k, &self.cfg.solver).ok()
    }

    fn lost(&self, frame: &Frame, matches: usize) -> TrackingLost {
        TrackingLost { frame: frame.id, matches }
    }

    /// Estimates the pose of `frame` against `map`. The first frame seeds the
    /// map as a keyframe at the origin.
    pub fn process_frame(&mut self, frame: &mut Frame, map: &Map) -> Result<TrackOutcome, TrackingLost> {
        if map.keyframes().is_empty() && self.reference.is_none() {
            return self.bootstrap(frame);
        }
        let predicted = self.predict(map);
        frame.predicted_pose = Some(predicted);
        let n = frame.keypoints.len();
        let mut claimed = vec![false; n];
        let mut matches: Vec<PointMatch> = Vec::new();
        let mut solves = Vec::new();

        if self.cfg.ablation.objects_in_odometry() {
            self.audit.object_associations += 1;
            let assoc = associate_objects(&frame.detections, map.objects().values(), &predicted, &self.k, &self.association);
            self.audit.object_aided_matchings += 1;
            let aided =
                associate_map_points_via_objects(&frame.keypoints, &frame.detections, &assoc.matches, map, &predicted, &self.cfg.points);
            frame.object_matches = assoc.matches;
            for m in aided {
                claimed[m.keypoint_index] = true;
                matches.push(m);
            }
        }
        if matches.len() < self.cfg.tracking.object_match_floor {
            let mut pool: BTreeSet<MapPointId> = self.last_matches.iter().copied().collect();
            if let Some(r) = self.reference.and_then(|r| map.keyframe(r)) {
                pool.extend(r.matched_points.values().copied());
            }
            for m in &matches {
                pool.remove(&m.map_point_id);
            }
            let mut radius = self.cfg.tracking.motion_search_radius;
            for _ in 0..2 {
                self.audit.projection_searches += 1;
                let pts: Vec<MapPointId> = pool.iter().copied().collect();
                let found = match_local_map(&frame.keypoints, &pts, map, &predicted, &self.k, &claimed, &self.cfg.points, radius);
                for m in found {
                    claimed[m.keypoint_index] = true;
                    pool.remove(&m.map_point_id);
                    matches.push(m);
                }
                if matches.len() >= self.cfg.tracking.min_tracked {
                    break;
                }
                radius *= 2.0;
            }
        }

        let stage1_matches = matches.len();
        let est1 = self.refine(&predicted, &matches, frame, map).ok_or_else(|| self.lost(frame, stage1_matches))?;
        solves.push(("pose1", est1.report.clone()));
        let inliers1: Vec<PointMatch> =
            matches.iter().zip(&est1.inliers).filter(|(_, &ok)| ok).map(|(m, _)| *m).collect();
        if inliers1.len() < MIN_POSE_MATCHES {
            return Err(self.lost(frame, inliers1.len()));
        }

        // Second stage: points of the keyframes that observe the matches.
        let mut votes: BTreeMap<KeyFrameId, usize> = BTreeMap::new();
        for m in &inliers1 {
            if let Some(p) = map.point(m.map_point_id) {
                for kf in p.observations.keys() {
                    *votes.entry(*kf).or_insert(0) += 1;
                }
            }
        }
        let mut ranked: Vec<(KeyFrameId, usize)> = votes.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(b.0.cmp(&a.0)));
        let mut local: BTreeSet<KeyFrameId> =
            ranked.into_iter().take(self.cfg.tracking.local_keyframes).map(|(k, _)| k).collect();
        if let Some(r) = self.reference {
            local.insert(r);
        }
        let matched: BTreeSet<MapPointId> = inliers1.iter().map(|m| m.map_point_id).collect();
        let mut local_points: BTreeSet<MapPointId> = BTreeSet::new();
        for kf in &local {
            if let Some(f) = map.keyframe(*kf) {
                local_points.extend(f.matched_points.values().filter(|p| !matched.contains(p)));
            }
        }
        let mut claimed2 = vec![false; n];
        for m in &inliers1 {
            claimed2[m.keypoint_index] = true;
        }
        let pts: Vec<MapPointId> = local_points.into_iter().collect();
        let extra = match_local_map(&frame.keypoints, &pts, map, &est1.pose, &self.k, &claimed2, &self.cfg.points, self.cfg.points.search_radius);
        let mut all = inliers1.clone();
        all.extend(extra);
        let stage2_matches = all.len();
        let est2 = self.refine(&est1.pose, &all, frame, map).ok_or_else(|| self.lost(frame, stage2_matches))?;
        solves.push(("pose2", est2.report.clone()));
        let inliers: Vec<PointMatch> = all.iter().zip(&est2.inliers).filter(|(_, &ok)| ok).map(|(m, _)| *m).collect();
        if inliers.len() < self.cfg.tracking.min_tracked {
            return Err(self.lost(frame, inliers.len()));
        }
        let pose = est2.pose;
        frame.refined_pose = Some(pose);
        frame.point_matches = inliers.clone();

        self.frames_since_keyframe += 1;
        let reference = self.reference.expect("tracking after bootstrap");
        let reference_tracked = map.keyframe(reference).map(|f| f.matched_points.len()).unwrap_or(0);
        let keyframe = if keyframe_decision(inliers.len(), reference_tracked, self.frames_since_keyframe, &self.cfg.keyframe) {
            Some(self.make_keyframe(frame, pose))
        } else {
            None
        };
        let (reference, relative) = match &keyframe {
            Some(kf) => (kf.id, Pose::identity()),
            None => {
                let ref_pose = map.keyframe(reference).map(|f| f.pose).unwrap_or(pose);
                (reference, pose.compose(&ref_pose.inverse()))
            }
        };
        self.push_history(pose);
        self.last_matches = inliers.iter().map(|m| m.map_point_id).collect();
        self.last_relative = Some((reference, relative));
        Ok(TrackOutcome {
            pose,
            stage1_pose: Some(est1.pose),
            keyframe,
            reference,
            relative,
            stage1_matches,
            stage1_inliers: inliers1.len(),
            stage2_matches,
            inliers: inliers.len(),
            solves,
        })
    }

    fn push_history(&mut self, pose: Pose) {
        self.history.push(pose);
        if self.history.len() > 2 {
            self.history.remove(0);
        }
    }

    fn make_keyframe(&mut self, frame: &Frame, pose: Pose) -> KeyFrame {
        let id = KeyFrameId(self.next_keyframe);
        self.next_keyframe += 1;
        let mut kf = KeyFrame::new(id, frame.timestamp, pose, frame.keypoints.clone(), frame.detections.clone());
        for m in &frame.point_matches {
            kf.matched_points.insert(m.keypoint_index, m.map_point_id);
        }
        if self.cfg.ablation.objects_in_odometry() {
            for m in &frame.object_matches {
                kf.observed_objects.insert(m.object_id, m.detection_index);
            }
        }
        self.reference = Some(id);
        self.frames_since_keyframe = 0;
        kf
    }

    fn bootstrap(&mut self, frame: &mut Frame) -> Result<TrackOutcome, TrackingLost> {
        let with_depth = frame.keypoints.iter().filter(|k| k.depth.is_some()).count();
        if with_depth < self.cfg.tracking.min_tracked {
            return Err(self.lost(frame, with_depth));
        }
        let pose = Pose::identity();
        frame.predicted_pose = Some(pose);
        frame.refined_pose = Some(pose);
        let kf = self.make_keyframe(frame, pose);
        self.push_history(pose);
        self.last_relative = Some((kf.id, Pose::identity()));
        Ok(TrackOutcome {
            pose,
            stage1_pose: None,
            reference: kf.id,
            relative: Pose::identity(),
            keyframe: Some(kf),
            stage1_matches: 0,
            stage1_inliers: 0,
            stage2_matches: 0,
            inliers: with_depth,
            solves: Vec::new(),
        })
    }
}
