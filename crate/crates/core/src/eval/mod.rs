//! Evaluation: trajectory error, association quality and object counts.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector3};
use serde::Serialize;

use crate::dataset::TumPose;
use crate::geometry::Intrinsics;
use crate::pipeline::{run_sequence, Ablation, FrameDiagnostics, PipelineConfig, PipelineError};
use crate::sim::FrameRecord;

mod da;

pub use da::{
    bench_data_association, cluttered_scene, ground_truth_object_count, matches_under_pose_perturbation, object_count_report,
    small_object_retention, small_object_suite, DaBenchOptions, DaBenchRow, ObjectCountReport, Retention,
};

/// Maximum timestamp gap when pairing estimated and reference poses.
pub const MAX_TIME_DIFFERENCE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("no estimated pose has a reference pose within 10 ms")]
    NoOverlap,
}

/// Pairs every estimated pose with the nearest reference pose in time,
/// keeping pairs closer than [`MAX_TIME_DIFFERENCE`]. `reference` must be
/// sorted by timestamp.
pub fn pair_by_timestamp(estimate: &[TumPose], reference: &[TumPose]) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    if reference.is_empty() {
        return pairs;
    }
    for (i, e) in estimate.iter().enumerate() {
        let j = reference.partition_point(|r| r.timestamp < e.timestamp);
        let best = [j.checked_sub(1), (j < reference.len()).then_some(j)]
            .into_iter()
            .flatten()
            .min_by(|&a, &b| {
                (reference[a].timestamp - e.timestamp).abs().total_cmp(&(reference[b].timestamp - e.timestamp).abs())
            });
        if let Some(j) = best {
            if (reference[j].timestamp - e.timestamp).abs() <= MAX_TIME_DIFFERENCE {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

/// Least-squares rigid transform `(R, t)` minimizing `Σ‖R·src + t − dst‖²`
/// (Kabsch/Umeyama without scale).
pub fn rigid_alignment(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> (Matrix3<f64>, Vector3<f64>) {
    let n = src.len().max(1) as f64;
    let mu_s = src.iter().sum::<Vector3<f64>>() / n;
    let mu_d = dst.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        cov += (d - mu_d) * (s - mu_s).transpose();
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
    let mut sign = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        sign[(2, 2)] = -1.0;
    }
    let r = u * sign * v_t;
    (r, mu_d - r * mu_s)
}

/// Root-mean-square distance between paired camera centers, optionally
/// after the best rigid alignment of the estimate onto the reference.
pub fn ate_rmse(estimate: &[TumPose], reference: &[TumPose], align: bool) -> Result<f64, EvalError> {
    let pairs = pair_by_timestamp(estimate, reference);
    if pairs.is_empty() {
        return Err(EvalError::NoOverlap);
    }
    let est: Vec<Vector3<f64>> = pairs.iter().map(|(i, _)| estimate[*i].pose.camera_center()).collect();
    let gt: Vec<Vector3<f64>> = pairs.iter().map(|(_, j)| reference[*j].pose.camera_center()).collect();
    let (r, t) = if align { rigid_alignment(&est, &gt) } else { (Matrix3::identity(), Vector3::zeros()) };
    let sum: f64 = est.iter().zip(&gt).map(|(e, g)| (r * e + t - g).norm_squared()).sum();
    Ok((sum / pairs.len() as f64).sqrt())
}

/// Precision, recall and F1 from raw counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Prf {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

impl Prf {
    pub fn precision(&self) -> f64 {
        ratio(self.true_positives, self.true_positives + self.false_positives)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.true_positives, self.true_positives + self.false_negatives)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Scores a stream of association decisions against ground truth. Each
/// estimated entity is labelled with the ground-truth id it was most often
/// matched to (ties: lower id). A decision is a true positive when the
/// measurement's ground truth equals that label; a matched measurement
/// whose truth differs, or that has none, is a false positive; an unmatched
/// measurement with ground truth is a false negative.
pub fn score_associations<E: Ord + Copy>(decisions: &[(Option<u64>, Option<E>)]) -> Prf {
    let mut votes: BTreeMap<E, BTreeMap<u64, usize>> = BTreeMap::new();
    for (truth, est) in decisions {
        if let (Some(t), Some(e)) = (truth, est) {
            *votes.entry(*e).or_default().entry(*t).or_insert(0) += 1;
        }
    }
    let label: BTreeMap<E, u64> = votes
        .into_iter()
        .map(|(e, v)| {
            let best = v.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))).map(|(t, _)| *t).expect("non-empty");
            (e, best)
        })
        .collect();
    let mut prf = Prf::default();
    for (truth, est) in decisions {
        match (truth, est) {
            (Some(t), Some(e)) if label.get(e) == Some(t) => prf.true_positives += 1,
            (_, Some(_)) => prf.false_positives += 1,
            (Some(_), None) => prf.false_negatives += 1,
            (None, None) => {}
        }
    }
    prf
}

/// Association quality of a run, for object and point matches.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct AssociationReport {
    pub objects: Prf,
    pub points: Prf,
}

/// Scores the per-frame matches recorded in `diagnostics` against the
/// ground-truth ids carried by `records`. Every detection and keypoint of a
/// tracked frame counts, including those filtered before matching.
pub fn association_report(records: &[FrameRecord], diagnostics: &[FrameDiagnostics]) -> AssociationReport {
    let by_id: BTreeMap<u64, &FrameRecord> = records.iter().map(|r| (r.id, r)).collect();
    let (mut objects, mut points) = (Vec::new(), Vec::new());
    for d in diagnostics {
        let Some(rec) = by_id.get(&d.frame) else { continue };
        let obj: BTreeMap<usize, _> = d.object_matches.iter().copied().collect();
        for (i, det) in rec.detections.iter().enumerate() {
            objects.push((det.object, obj.get(&i).copied()));
        }
        let pts: BTreeMap<usize, _> = d.point_matches.iter().copied().collect();
        for (i, kp) in rec.keypoints.iter().enumerate() {
            points.push((kp.landmark, pts.get(&i).copied()));
        }
    }
    AssociationReport { objects: score_associations(&objects), points: score_associations(&points) }
}

/// Ground-truth trajectory carried by the records.
pub fn groundtruth_trajectory(records: &[FrameRecord]) -> Vec<TumPose> {
    records
        .iter()
        .filter_map(|r| Some(TumPose { timestamp: r.timestamp, pose: r.groundtruth_pose()? }))
        .collect()
}

/// Wall-clock cost of a run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct RuntimeStats {
    pub frames: usize,
    pub seconds: f64,
}

impl RuntimeStats {
    pub fn per_frame_ms(&self) -> f64 {
        if self.frames == 0 {
            0.0
        } else {
            1e3 * self.seconds / self.frames as f64
        }
    }
}

/// Everything measured about one run.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct EvalReport {
    /// Aligned ATE RMSE; absent without ground truth.
    pub ate_rmse: Option<f64>,
    pub tracked_frames: usize,
    pub total_frames: usize,
    pub objects: usize,
    pub association: Option<AssociationReport>,
    pub object_counts: Option<ObjectCountReport>,
    pub runtime: RuntimeStats,
}

/// One line of an ablation table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AblationRow {
    pub ablation: Ablation,
    pub ate_rmse: Option<f64>,
    pub tracked_frames: usize,
    pub total_frames: usize,
    pub lost_early: bool,
    pub runtime: RuntimeStats,
}

/// Runs `base` under each ablation and reports the aligned ATE RMSE of the
/// tracked part of the sequence.
pub fn ablation_rows(
    records: &[FrameRecord],
    k: &Intrinsics,
    base: &PipelineConfig,
    variants: &[Ablation],
) -> Result<Vec<AblationRow>, PipelineError> {
    let truth = groundtruth_trajectory(records);
    variants
        .iter()
        .map(|&ablation| {
            let cfg = PipelineConfig { ablation, ..*base };
            let start = std::time::Instant::now();
            let out = run_sequence(records, k, &cfg)?;
            let seconds = start.elapsed().as_secs_f64();
            Ok(AblationRow {
                ablation,
                ate_rmse: ate_rmse(&out.trajectory, &truth, true).ok(),
                tracked_frames: out.tracked_frames(),
                total_frames: out.frames_total,
                lost_early: out.lost_early(),
                runtime: RuntimeStats { frames: out.tracked_frames(), seconds },
            })
        })
        .collect()
}
