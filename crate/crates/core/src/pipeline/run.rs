//! Sequence driver: runs tracking and mapping over a frame stream, either
//! interleaved on one thread or as two concurrent stages.

use std::sync::mpsc::sync_channel;
use std::sync::{Arc, Mutex};

use crate::association::PointMatch;
use crate::dataset::TumPose;
use crate::geometry::{Intrinsics, Pose};
use crate::map::{KeyFrameId, Map, MapError, MapPointId, ObjectId};
use crate::optimize::SolveReport;
use crate::sim::FrameRecord;

use super::mapping::{Mapper, MappingAudit, MappingReport};
use super::tracking::{TrackOutcome, Tracker, TrackingAudit, TrackingLost};
use super::{ConfigError, Frame, PipelineConfig};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("timestamps must increase strictly (frame {0})")]
    NonMonotonicTimestamps(u64),
    #[error(transparent)]
    Map(#[from] MapError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameDiagnostics {
    pub frame: u64,
    pub timestamp: f64,
    pub keyframe: Option<KeyFrameId>,
    pub predicted_pose: Option<Pose>,
    pub stage1_pose: Option<Pose>,
    /// Pose at tracking time (before later mapping corrections).
    pub pose: Pose,
    pub stage1_matches: usize,
    pub stage1_inliers: usize,
    pub stage2_matches: usize,
    pub inliers: usize,
    /// (index into the record's detections, object).
    pub object_matches: Vec<(usize, ObjectId)>,
    /// (keypoint index, map point).
    pub point_matches: Vec<(usize, MapPointId)>,
    pub pose_iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverLogRow {
    pub frame: u64,
    pub stage: &'static str,
    pub iteration: usize,
    pub cost: f64,
    pub damping: f64,
    pub accepted: bool,
}

#[derive(Debug)]
pub struct RunOutput {
    pub trajectory: Vec<TumPose>,
    pub map: Map,
    pub diagnostics: Vec<FrameDiagnostics>,
    pub solver_log: Vec<SolverLogRow>,
    pub tracking_audit: TrackingAudit,
    pub mapping_audit: MappingAudit,
    pub lost: Option<TrackingLost>,
    pub frames_total: usize,
}

impl RunOutput {
    pub fn tracked_frames(&self) -> usize {
        self.diagnostics.len()
    }

    /// Tracking was lost before half of the input had been processed.
    pub fn lost_early(&self) -> bool {
        self.lost.is_some() && 2 * self.tracked_frames() < self.frames_total
    }
}

struct Recorder {
    log_solver: bool,
    diagnostics: Vec<FrameDiagnostics>,
    anchors: Vec<(f64, KeyFrameId, Pose)>,
    solver_log: Vec<SolverLogRow>,
}

impl Recorder {
    fn log(&mut self, frame: u64, solves: &[(&'static str, SolveReport)]) {
        if !self.log_solver {
            return;
        }
        for (stage, r) in solves {
            for t in &r.trace {
                self.solver_log.push(SolverLogRow {
                    frame,
                    stage,
                    iteration: t.iteration,
                    cost: t.cost,
                    damping: t.damping,
                    accepted: t.accepted,
                });
            }
        }
    }

    fn record(&mut self, frame: &Frame, out: &TrackOutcome) {
        self.log(frame.id, &out.solves);
        self.anchors.push((frame.timestamp, out.reference, out.relative));
        self.diagnostics.push(FrameDiagnostics {
            frame: frame.id,
            timestamp: frame.timestamp,
            keyframe: out.keyframe.as_ref().map(|k| k.id),
            predicted_pose: frame.predicted_pose,
            stage1_pose: out.stage1_pose,
            pose: out.pose,
            stage1_matches: out.stage1_matches,
            stage1_inliers: out.stage1_inliers,
            stage2_matches: out.stage2_matches,
            inliers: out.inliers,
            object_matches: frame
                .object_matches
                .iter()
                .map(|m| (frame.detection_source[m.detection_index], m.object_id))
                .collect(),
            point_matches: frame.point_matches.iter().map(|m: &PointMatch| (m.keypoint_index, m.map_point_id)).collect(),
            pose_iterations: out.solves.iter().map(|(_, r)| r.iterations).sum(),
        });
    }

    fn log_mapping(&mut self, frame: u64, report: &MappingReport) {
        self.log(frame, &report.solves);
    }

    /// Final trajectory: each frame re-anchored on its reference keyframe's
    /// optimized pose.
    fn trajectory(&self, map: &Map) -> Vec<TumPose> {
        self.anchors
            .iter()
            .map(|(ts, kf, rel)| {
                let base = map.keyframe(*kf).map(|f| f.pose).unwrap_or_else(Pose::identity);
                TumPose { timestamp: *ts, pose: rel.compose(&base).renormalized() }
            })
            .collect()
    }
}

fn check_timestamps(frames: &[FrameRecord]) -> Result<(), PipelineError> {
    for w in frames.windows(2) {
        if !(w[1].timestamp > w[0].timestamp) {
            return Err(PipelineError::NonMonotonicTimestamps(w[1].id));
        }
    }
    Ok(())
}

/// Runs the full system over `frames`. Processing stops at the first frame
/// whose tracking is lost; the output then covers the frames before it.
pub fn run_sequence(frames: &[FrameRecord], k: &Intrinsics, cfg: &PipelineConfig) -> Result<RunOutput, PipelineError> {
    cfg.validate()?;
    check_timestamps(frames)?;
    if cfg.deterministic {
        run_interleaved(frames, k, cfg)
    } else {
        run_pipelined(frames, k, cfg)
    }
}

fn run_interleaved(frames: &[FrameRecord], k: &Intrinsics, cfg: &PipelineConfig) -> Result<RunOutput, PipelineError> {
    let mut map = Map::new();
    let mut tracker = Tracker::new(cfg, *k);
    let mut mapper = Mapper::new(cfg, *k);
    let mut rec = Recorder { log_solver: cfg.log_solver, diagnostics: Vec::new(), anchors: Vec::new(), solver_log: Vec::new() };
    let mut lost = None;
    for record in frames {
        let mut frame = Frame::from_record(record, k, cfg.tracking.min_confidence);
        let out = match tracker.process_frame(&mut frame, &map) {
            Ok(o) => o,
            Err(e) => {
                log::warn!("{e}");
                lost = Some(e);
                break;
            }
        };
        rec.record(&frame, &out);
        if let Some(kf) = out.keyframe {
            let id = map.insert_keyframe(kf)?;
            let report = mapper.step(&mut map, id)?;
            rec.log_mapping(frame.id, &report);
        }
    }
    Ok(RunOutput {
        trajectory: rec.trajectory(&map),
        diagnostics: rec.diagnostics,
        solver_log: rec.solver_log,
        tracking_audit: tracker.audit,
        mapping_audit: mapper.audit,
        lost,
        frames_total: frames.len(),
        map,
    })
}

/// Mapping runs on its own thread, fed through a bounded queue; both stages
/// take the map lock for each unit of work. Results depend on scheduling.
fn run_pipelined(frames: &[FrameRecord], k: &Intrinsics, cfg: &PipelineConfig) -> Result<RunOutput, PipelineError> {
    let shared = Arc::new(Mutex::new(Map::new()));
    let mut tracker = Tracker::new(cfg, *k);
    let mut mapper = Mapper::new(cfg, *k);
    let mut rec = Recorder { log_solver: cfg.log_solver, diagnostics: Vec::new(), anchors: Vec::new(), solver_log: Vec::new() };
    let mut lost = None;
    let mut pending = frames.iter();

    // The first keyframe is mapped synchronously so tracking has points.
    if let Some(record) = pending.next() {
        let mut frame = Frame::from_record(record, k, cfg.tracking.min_confidence);
        let mut map = shared.lock().expect("map lock");
        match tracker.process_frame(&mut frame, &map) {
            Ok(out) => {
                rec.record(&frame, &out);
                if let Some(kf) = out.keyframe {
                    let id = map.insert_keyframe(kf)?;
                    let report = mapper.step(&mut map, id)?;
                    rec.log_mapping(frame.id, &report);
                }
            }
            Err(e) => lost = Some(e),
        }
    }

    let (tx, rx) = sync_channel::<(u64, KeyFrameId)>(2);
    let worker_map = Arc::clone(&shared);
    let worker = std::thread::spawn(move || -> Result<(Mapper, Vec<(u64, MappingReport)>), MapError> {
        let mut reports = Vec::new();
        for (frame, kf) in rx {
            let mut map = worker_map.lock().expect("map lock");
            reports.push((frame, mapper.step(&mut map, kf)?));
        }
        Ok((mapper, reports))
    });

    if lost.is_none() {
        for record in pending {
            let mut frame = Frame::from_record(record, k, cfg.tracking.min_confidence);
            let inserted = {
                let mut map = shared.lock().expect("map lock");
                match tracker.process_frame(&mut frame, &map) {
                    Ok(out) => {
                        rec.record(&frame, &out);
                        match out.keyframe {
                            Some(kf) => Some(map.insert_keyframe(kf)?),
                            None => None,
                        }
                    }
                    Err(e) => {
                        log::warn!("{e}");
                        lost = Some(e);
                        break;
                    }
                }
            };
            if let Some(id) = inserted {
                if tx.send((frame.id, id)).is_err() {
                    break;
                }
            }
        }
    }
    drop(tx);
    let (mapper, reports) = worker.join().expect("mapping thread panicked")?;
    for (frame, r) in &reports {
        rec.log_mapping(*frame, r);
    }
    let map = Arc::try_unwrap(shared).expect("worker finished").into_inner().expect("map lock");
    Ok(RunOutput {
        trajectory: rec.trajectory(&map),
        diagnostics: rec.diagnostics,
        solver_log: rec.solver_log,
        tracking_audit: tracker.audit,
        mapping_audit: mapper.audit,
        lost,
        frames_total: frames.len(),
        map,
    })
}
