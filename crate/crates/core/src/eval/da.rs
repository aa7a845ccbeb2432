//! Object data-association benchmarks on simulated sequences.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{Vector2, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use serde::Serialize;

use super::{score_associations, Prf};
use crate::association::{associate_projected, AssociationConfig, AssociationMethod, ProjectedObject};
use crate::features::ObservationModel;
use crate::geometry::{ellipse_to_gaussian, Intrinsics, Pose};
use crate::map::{KeyFrame, KeyFrameId, Map, MapError, ObjectId};
use crate::optimize::SolverConfig;
use crate::pipeline::{Frame, ObjectMapper};
use crate::sim::{projected_object, FrameRecord, Scene, SceneSpec, TrajectorySpec};

/// Settings of the object-mapping benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DaBenchOptions {
    /// Every n-th frame becomes a keyframe.
    pub keyframe_stride: usize,
    /// σ of the per-keyframe pose perturbation (radians).
    pub rotation_noise: f64,
    /// σ of the per-keyframe pose perturbation (scene units).
    pub translation_noise: f64,
    pub seed: u64,
    pub n_init: usize,
    pub candidate_expiry: u64,
    pub max_views: usize,
    pub min_confidence: f64,
}

impl Default for DaBenchOptions {
    fn default() -> Self {
        Self {
            keyframe_stride: 5,
            rotation_noise: 0.002,
            translation_noise: 0.01,
            seed: 0,
            n_init: 3,
            candidate_expiry: 10,
            max_views: 24,
            min_confidence: 0.2,
        }
    }
}

/// One cell pair of the object-count table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DaBenchRow {
    pub method: AssociationMethod,
    pub model: ObservationModel,
    pub objects: usize,
    pub ground_truth: usize,
    pub association: Prf,
}

impl DaBenchRow {
    /// Distance of the reconstructed object count from ground truth.
    pub fn count_error(&self) -> usize {
        self.objects.abs_diff(self.ground_truth)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ObjectCountReport {
    pub ground_truth: usize,
    pub rows: Vec<DaBenchRow>,
}

impl ObjectCountReport {
    pub fn row(&self, method: AssociationMethod, model: ObservationModel) -> Option<&DaBenchRow> {
        self.rows.iter().find(|r| r.method == method && r.model == model)
    }
}

/// Ground-truth objects detected in at least `n_init` of the keyframes a
/// benchmark run would use.
pub fn ground_truth_object_count(records: &[FrameRecord], opts: &DaBenchOptions) -> usize {
    let mut seen: BTreeMap<u64, usize> = BTreeMap::new();
    for rec in records.iter().step_by(opts.keyframe_stride.max(1)) {
        let ids: BTreeSet<u64> =
            rec.detections.iter().filter(|d| d.confidence >= opts.min_confidence).filter_map(|d| d.object).collect();
        for id in ids {
            *seen.entry(id).or_insert(0) += 1;
        }
    }
    seen.values().filter(|&&n| n >= opts.n_init).count()
}

fn perturbed(pose: &Pose, rng: &mut ChaCha8Rng, opts: &DaBenchOptions) -> Pose {
    let (t, r) = (opts.translation_noise, opts.rotation_noise);
    let mut xi = Vector6::zeros();
    if t > 0.0 {
        let n = Normal::new(0.0, t).expect("σ > 0");
        for i in 0..3 {
            xi[i] = n.sample(rng);
        }
    }
    if r > 0.0 {
        let n = Normal::new(0.0, r).expect("σ > 0");
        for i in 3..6 {
            xi[i] = n.sample(rng);
        }
    }
    pose.retract_left(&xi)
}

/// Builds an object map from every `keyframe_stride`-th frame at its
/// (perturbed) ground-truth pose with one association method and
/// observation model, then counts objects and scores every keyframe
/// detection's final object assignment.
pub fn bench_data_association(
    records: &[FrameRecord],
    k: &Intrinsics,
    method: AssociationMethod,
    model: ObservationModel,
    opts: &DaBenchOptions,
) -> Result<DaBenchRow, MapError> {
    let association = AssociationConfig { method, observation_model: model, ..AssociationConfig::default() };
    let mut mapper =
        ObjectMapper::new(association, SolverConfig::ellipsoid(), opts.n_init, opts.candidate_expiry, opts.max_views);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut map = Map::new();
    let mut sources: BTreeMap<KeyFrameId, (usize, Vec<usize>)> = BTreeMap::new();
    for (n, (i, rec)) in records.iter().enumerate().step_by(opts.keyframe_stride.max(1)).enumerate() {
        let Some(truth) = rec.groundtruth_pose() else { continue };
        let pose = perturbed(&truth, &mut rng, opts);
        let frame = Frame::from_record(rec, k, opts.min_confidence);
        let id = map.insert_keyframe(KeyFrame::new(KeyFrameId(n as u64), rec.timestamp, pose, frame.keypoints, frame.detections))?;
        sources.insert(id, (i, frame.detection_source));
        mapper.process_keyframe(&mut map, id, k, true)?;
    }
    let mut decisions: Vec<(Option<u64>, Option<ObjectId>)> = Vec::new();
    for (id, kf) in map.keyframes() {
        let (rec_index, source) = &sources[id];
        let assigned: BTreeMap<usize, ObjectId> = kf.observed_objects.iter().map(|(o, d)| (*d, *o)).collect();
        for (d, src) in source.iter().enumerate() {
            decisions.push((records[*rec_index].detections[*src].object, assigned.get(&d).copied()));
        }
    }
    Ok(DaBenchRow {
        method,
        model,
        objects: map.objects().len(),
        ground_truth: ground_truth_object_count(records, opts),
        association: score_associations(&decisions),
    })
}

/// Runs [`bench_data_association`] for every method with both observation
/// models.
pub fn object_count_report(records: &[FrameRecord], k: &Intrinsics, opts: &DaBenchOptions) -> Result<ObjectCountReport, MapError> {
    let mut rows = Vec::new();
    for model in [ObservationModel::BoxInscribed, ObservationModel::ContourFit] {
        for method in AssociationMethod::ALL {
            rows.push(bench_data_association(records, k, method, model, opts)?);
        }
    }
    Ok(ObjectCountReport { ground_truth: ground_truth_object_count(records, opts), rows })
}

/// A scene of many tiny objects (a few pixels across) seen from a distance,
/// with precise segmentation contours.
pub fn small_object_suite(seed: u64) -> SceneSpec {
    let mut spec = SceneSpec { seed, frames: 120, min_detection_px: 1.5, ..SceneSpec::default() };
    spec.objects.count = 30;
    spec.objects.min_axis = 0.015;
    spec.objects.max_axis = 0.06;
    spec.objects.cluster_radius = 1.2;
    spec.objects.points_per_object = 10;
    spec.noise.contour_px = 0.3;
    spec.trajectory = TrajectorySpec::Orbit { radius: 5.5, height: 1.0, laps: 1.0 };
    spec
}

/// The default loop walk through a denser cluster of 30 objects, used for
/// the object-count benchmark.
pub fn cluttered_scene(seed: u64) -> SceneSpec {
    let mut spec = SceneSpec { seed, ..SceneSpec::default() };
    spec.objects.count = 30;
    spec.objects.cluster_radius = 2.0;
    spec
}

/// Counts of correct associations against ground-truth projections.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Retention {
    pub retained: usize,
    pub total: usize,
}

impl Retention {
    pub fn rate(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.retained as f64 / self.total as f64
        }
    }
}

/// Ground-truth projections of the objects visible in `rec`, keyed by the
/// object id.
fn truth_projections(scene: &Scene, pose: &Pose, min_px: f64) -> Vec<(ProjectedObject, f64)> {
    scene
        .objects
        .iter()
        .filter_map(|o| {
            let e = projected_object(scene, o, pose, min_px)?;
            let p = ProjectedObject::from_gaussian(ObjectId(o.id), o.category, ellipse_to_gaussian(&e))?;
            Some((p, e.area()))
        })
        .collect()
}

/// For detections of objects whose projected area is below `max_area`,
/// counts how often `method` still associates them with their own object
/// after every projection is shifted `shift_px` pixels in a random
/// direction.
pub fn small_object_retention(
    scene: &Scene,
    records: &[FrameRecord],
    method: AssociationMethod,
    shift_px: f64,
    max_area: f64,
    min_px: f64,
    seed: u64,
) -> Retention {
    let k = &scene.intrinsics;
    let cfg = AssociationConfig::with_method(method);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Retention::default();
    for rec in records {
        let Some(pose) = rec.groundtruth_pose() else { continue };
        let frame = Frame::from_record(rec, k, min_confidence());
        let projected: Vec<(ProjectedObject, f64)> = truth_projections(scene, &pose, min_px)
            .into_iter()
            .filter_map(|(p, area)| {
                let a: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let mut g = p.gaussian;
                g.mean += Vector2::new(a.cos(), a.sin()) * shift_px;
                Some((ProjectedObject::from_gaussian(p.id, p.category, g)?, area))
            })
            .collect();
        let small: BTreeSet<ObjectId> = projected.iter().filter(|(_, a)| *a < max_area).map(|(p, _)| p.id).collect();
        let objs: Vec<ProjectedObject> = projected.into_iter().map(|(p, _)| p).collect();
        let assoc = associate_projected(&frame.detections, &objs, &cfg);
        let matched: BTreeMap<usize, ObjectId> = assoc.matches.iter().map(|m| (m.detection_index, m.object_id)).collect();
        for (d, src) in frame.detection_source.iter().enumerate() {
            let Some(truth) = rec.detections[*src].object.map(ObjectId) else { continue };
            if !small.contains(&truth) {
                continue;
            }
            out.total += 1;
            if matched.get(&d) == Some(&truth) {
                out.retained += 1;
            }
        }
    }
    out
}

fn min_confidence() -> f64 {
    crate::pipeline::TrackingParams::default().min_confidence
}

/// Total number of detections `method` associates when the ground-truth
/// landmarks are projected from a pose perturbed by `level` times a fixed
/// per-frame random twist of unit rotation (degrees) and `translation_per_degree`
/// translation.
pub fn matches_under_pose_perturbation(
    scene: &Scene,
    records: &[FrameRecord],
    method: AssociationMethod,
    level: f64,
    translation_per_degree: f64,
    seed: u64,
) -> usize {
    let k = &scene.intrinsics;
    let cfg = AssociationConfig::with_method(method);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0;
    for rec in records {
        let Some(pose) = rec.groundtruth_pose() else { continue };
        let axis: [f64; 3] = UnitSphere.sample(&mut rng);
        let dir: [f64; 3] = UnitSphere.sample(&mut rng);
        let rot = level.to_radians();
        let trans = level * translation_per_degree;
        let xi = Vector6::new(dir[0] * trans, dir[1] * trans, dir[2] * trans, axis[0] * rot, axis[1] * rot, axis[2] * rot);
        let shifted = pose.retract_left(&xi);
        let frame = Frame::from_record(rec, k, min_confidence());
        let objs: Vec<ProjectedObject> = scene
            .objects
            .iter()
            .filter_map(|o| {
                let g = crate::geometry::project_dual_quadric_gaussian(
                    &crate::geometry::ellipsoid_to_dual_quadric(&o.ellipsoid),
                    &shifted,
                    k,
                )
                .ok()?;
                if !k.contains(&g.mean, 0.0) {
                    return None;
                }
                ProjectedObject::from_gaussian(ObjectId(o.id), o.category, g)
            })
            .collect();
        total += associate_projected(&frame.detections, &objs, &cfg).matches.len();
    }
    total
}
