//! The odometry and mapping loop: frame ingestion, motion prediction, object
//! association, object-aided point matching, two-stage pose refinement,
//! keyframe selection and the mapping stage.

mod mapping;
mod objects;
mod run;
mod tracking;

use serde::{Deserialize, Serialize};

use crate::association::{AssociationConfig, AssociationMethod, ObjectMatch, PointMatch, PointMatchConfig};
use crate::features::{Detection, Keypoint, ObservationModel};
use crate::geometry::{Intrinsics, Pose};
use crate::optimize::SolverConfig;
use crate::sim::FrameRecord;

pub use mapping::{mapping_step, Mapper, MappingAudit, MappingReport};
pub use objects::{CandidateTracker, ObjectMapper, ObjectUpdate};
pub use run::{run_sequence, FrameDiagnostics, PipelineError, RunOutput, SolverLogRow};
pub use tracking::{TrackOutcome, Tracker, TrackingAudit, TrackingLost};

/// Which parts of the system use object landmarks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Objects drive both odometry and the local-map selection in mapping.
    #[default]
    Full,
    /// Objects are associated and used for point matching during odometry;
    /// the mapping window uses point covisibility only.
    ObjectsInOdometryOnly,
    /// Odometry uses projection-window point search only; objects are
    /// associated at keyframes and select the mapping window.
    ObjectsInMappingOnly,
    /// Full system with IoU/label association and box-inscribed ellipses.
    AlternateDaModel,
    /// Reference system with no object landmarks at all.
    PointsOnly,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::Full,
        Ablation::ObjectsInOdometryOnly,
        Ablation::ObjectsInMappingOnly,
        Ablation::AlternateDaModel,
        Ablation::PointsOnly,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::ObjectsInOdometryOnly => "odom",
            Self::ObjectsInMappingOnly => "map",
            Self::AlternateDaModel => "alt",
            Self::PointsOnly => "points",
        }
    }

    pub fn objects_in_odometry(&self) -> bool {
        matches!(self, Self::Full | Self::ObjectsInOdometryOnly | Self::AlternateDaModel)
    }

    pub fn objects_in_mapping(&self) -> bool {
        matches!(self, Self::Full | Self::ObjectsInMappingOnly | Self::AlternateDaModel)
    }

    pub fn maintains_objects(&self) -> bool {
        !matches!(self, Self::PointsOnly)
    }

    /// Association settings this variant runs with, starting from `base`.
    pub fn association(&self, base: &AssociationConfig) -> AssociationConfig {
        match self {
            Self::AlternateDaModel => AssociationConfig {
                method: AssociationMethod::Da1,
                observation_model: ObservationModel::BoxInscribed,
                ..*base
            },
            _ => *base,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KeyframePolicy {
    /// A keyframe is due once the tracked points fall below this fraction of
    /// the reference keyframe's points.
    pub min_tracked_ratio: f64,
    pub max_gap: usize,
    pub min_gap: usize,
}

impl Default for KeyframePolicy {
    fn default() -> Self {
        Self { min_tracked_ratio: 0.9, max_gap: 20, min_gap: 3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackingParams {
    /// Radius of the projection-window search around motion-model predictions.
    pub motion_search_radius: f64,
    /// Below this many object-aided matches the projection-window search
    /// runs as well.
    pub object_match_floor: usize,
    /// Inliers required after the second pose refinement.
    pub min_tracked: usize,
    /// Keyframes (by shared matches) whose points form the second-stage local map.
    pub local_keyframes: usize,
    /// Detections below this confidence are discarded on ingestion.
    pub min_confidence: f64,
}

impl Default for TrackingParams {
    fn default() -> Self {
        Self {
            motion_search_radius: 15.0,
            object_match_floor: 20,
            min_tracked: 15,
            local_keyframes: 20,
            min_confidence: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MappingParams {
    /// Keyframes in which an unmatched detection must recur before it
    /// becomes an object landmark.
    pub n_init: usize,
    /// Candidates unseen for this many keyframes are dropped.
    pub candidate_expiry: u64,
    pub max_point_depth: f64,
    pub fuse_radius: f64,
    pub point_neighbors: usize,
    /// Cap on object-covisibility neighbors; `None` takes all of them.
    pub object_neighbors: Option<usize>,
    /// Observation budget per object re-estimation (evenly subsampled).
    pub max_object_views: usize,
    pub reoptimize_objects: bool,
    pub cull_points: bool,
    pub cull_min_age: u64,
    pub cull_min_observations: usize,
}

impl Default for MappingParams {
    fn default() -> Self {
        Self {
            n_init: 3,
            candidate_expiry: 10,
            max_point_depth: 12.0,
            fuse_radius: 4.0,
            point_neighbors: 10,
            object_neighbors: None,
            max_object_views: 24,
            reoptimize_objects: true,
            cull_points: true,
            cull_min_age: 3,
            cull_min_observations: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub ablation: Ablation,
    pub association: AssociationConfig,
    pub points: PointMatchConfig,
    pub solver: SolverConfig,
    pub bundle_solver: SolverConfig,
    pub ellipsoid_solver: SolverConfig,
    pub keyframe: KeyframePolicy,
    pub tracking: TrackingParams,
    pub mapping: MappingParams,
    /// Interleave odometry and mapping on one thread (bit-reproducible).
    pub deterministic: bool,
    /// Record every solver iteration in the run output.
    pub log_solver: bool,
}

/// Virtual stereo `bf` (pixel·m) used to weigh measured depth in pose
/// refinement and bundle adjustment.
pub const DEPTH_BF: f64 = 40.0;

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            ablation: Ablation::Full,
            association: AssociationConfig::default(),
            points: PointMatchConfig::default(),
            solver: SolverConfig::pose().with_depth(DEPTH_BF),
            bundle_solver: SolverConfig::bundle().with_depth(DEPTH_BF),
            ellipsoid_solver: SolverConfig::ellipsoid(),
            keyframe: KeyframePolicy::default(),
            tracking: TrackingParams::default(),
            mapping: MappingParams::default(),
            deterministic: true,
            log_solver: false,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(&'static str),
}

impl PipelineConfig {
    pub fn with_ablation(ablation: Ablation) -> Self {
        Self { ablation, ..Self::default() }
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// The association settings in effect for this configuration's ablation.
    pub fn effective_association(&self) -> AssociationConfig {
        self.ablation.association(&self.association)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !self.association.is_valid() {
            return Err(ConfigError::Invalid("association"));
        }
        if !(self.solver.is_valid() && self.bundle_solver.is_valid() && self.ellipsoid_solver.is_valid()) {
            return Err(ConfigError::Invalid("solver"));
        }
        let kp = &self.keyframe;
        if !(kp.min_tracked_ratio > 0.0 && kp.min_tracked_ratio <= 1.0) || kp.max_gap < kp.min_gap || kp.max_gap == 0 {
            return Err(ConfigError::Invalid("keyframe"));
        }
        let t = &self.tracking;
        if !(t.motion_search_radius > 0.0) || t.min_tracked < crate::optimize::MIN_POSE_MATCHES || t.local_keyframes == 0 {
            return Err(ConfigError::Invalid("tracking"));
        }
        if !(0.0..=1.0).contains(&t.min_confidence) {
            return Err(ConfigError::Invalid("tracking.min_confidence"));
        }
        let m = &self.mapping;
        if m.n_init == 0 || !(m.max_point_depth > 0.0) || !(m.fuse_radius > 0.0) || m.max_object_views < 3 {
            return Err(ConfigError::Invalid("mapping"));
        }
        if !(self.points.ratio > 0.0 && self.points.ratio <= 1.0) || !(self.points.search_radius > 0.0) {
            return Err(ConfigError::Invalid("points"));
        }
        Ok(())
    }
}

/// One input frame as seen by the tracker.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub id: u64,
    pub timestamp: f64,
    pub keypoints: Vec<Keypoint>,
    pub detections: Vec<Detection>,
    /// For each kept detection, its index in the source record.
    pub detection_source: Vec<usize>,
    pub predicted_pose: Option<Pose>,
    pub refined_pose: Option<Pose>,
    pub point_matches: Vec<PointMatch>,
    pub object_matches: Vec<ObjectMatch>,
}

impl Frame {
    /// Converts a record: fits an ellipse per detection, dropping detections
    /// below `min_confidence` and contours that cannot be fitted.
    pub fn from_record(rec: &FrameRecord, k: &Intrinsics, min_confidence: f64) -> Self {
        let keypoints: Vec<Keypoint> = rec
            .keypoints
            .iter()
            .map(|kp| Keypoint {
                pixel: nalgebra::Vector2::new(kp.u, kp.v),
                descriptor: kp.descriptor,
                depth: kp.depth.filter(|d| d.is_finite() && *d > 0.0),
            })
            .collect();
        let mut detections = Vec::new();
        let mut detection_source = Vec::new();
        for (i, d) in rec.detections.iter().enumerate() {
            if d.confidence < min_confidence {
                continue;
            }
            match Detection::from_contour(d.category, d.confidence, d.contour_points(), &keypoints, k) {
                Ok(det) => {
                    detections.push(det);
                    detection_source.push(i);
                }
                Err(e) => log::debug!("frame {}: detection {i} dropped: {e}", rec.id),
            }
        }
        Self {
            id: rec.id,
            timestamp: rec.timestamp,
            keypoints,
            detections,
            detection_source,
            predicted_pose: None,
            refined_pose: None,
            point_matches: Vec::new(),
            object_matches: Vec::new(),
        }
    }
}

/// Constant-velocity prediction from the most recent poses (oldest first):
/// the last pose composed with the last inter-frame motion.
pub fn predict_pose(previous: &[Pose]) -> Pose {
    match previous {
        [] => Pose::identity(),
        [only] => *only,
        [.., a, b] => {
            let motion = b.compose(&a.inverse());
            motion.compose(b).renormalized()
        }
    }
}

/// Whether the current frame should become a keyframe.
pub fn keyframe_decision(tracked: usize, reference_tracked: usize, frames_since_keyframe: usize, policy: &KeyframePolicy) -> bool {
    if frames_since_keyframe < policy.min_gap {
        return false;
    }
    frames_since_keyframe >= policy.max_gap || (tracked as f64) < policy.min_tracked_ratio * reference_tracked as f64
}
