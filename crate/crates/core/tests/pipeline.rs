use std::collections::BTreeSet;

use hierslam_core::dataset::TumPose;
use hierslam_core::eval::{ate_rmse, groundtruth_trajectory, matches_under_pose_perturbation};
use hierslam_core::map::Map;
use hierslam_core::pipeline::{run_sequence, Mapper, RunOutput, Tracker};
use hierslam_core::sim::{generate_scene, FrameRecord, NoiseSpec, Scene, SceneSpec, TrajectorySpec};
use hierslam_core::{Ablation, AssociationMethod, Frame, KeyFrameId, PipelineConfig, Pose};

fn loop_spec(seed: u64, frames: usize, laps: f64) -> SceneSpec {
    let mut spec = SceneSpec { seed, frames, ..SceneSpec::default() };
    spec.trajectory = TrajectorySpec::LoopWalk { radius: 3.5, height: 1.3, laps, jitter: 0.002, jitter_rot: 0.001 };
    spec
}

fn scene(spec: &SceneSpec) -> (Scene, Vec<FrameRecord>) {
    generate_scene(spec).expect("valid scene")
}

fn run(records: &[FrameRecord], scene: &Scene, ablation: Ablation) -> RunOutput {
    run_sequence(records, &scene.intrinsics, &PipelineConfig::with_ablation(ablation)).expect("pipeline runs")
}

fn dump(map: &Map) -> Vec<u8> {
    let mut out = Vec::new();
    map.write_dump(&mut out).unwrap();
    out
}

/// Ground-truth pose re-expressed in the odometry frame, which starts at the
/// first camera.
fn odometry_truth(records: &[FrameRecord], i: usize) -> Pose {
    let first = records[0].groundtruth_pose().unwrap();
    records[i].groundtruth_pose().unwrap().compose(&first.inverse())
}

#[test]
fn interleaved_runs_are_bit_identical() {
    let (s, records) = scene(&loop_spec(11, 150, 0.5));
    let a = run(&records, &s, Ablation::Full);
    let b = run(&records, &s, Ablation::Full);
    assert_eq!(a.trajectory.len(), 150);
    let bits = |t: &[TumPose]| -> Vec<u64> {
        t.iter().flat_map(|p| hierslam_core::sim::pose_to_tum(&p.pose).map(f64::to_bits).into_iter().chain([p.timestamp.to_bits()])).collect()
    };
    assert_eq!(bits(&a.trajectory), bits(&b.trajectory));
    assert_eq!(dump(&a.map), dump(&b.map));
}

#[test]
fn ablation_variants_only_touch_their_object_paths() {
    let (s, records) = scene(&loop_spec(12, 150, 0.5));

    let full = run(&records, &s, Ablation::Full);
    assert!(full.tracking_audit.object_associations > 0);
    assert!(full.tracking_audit.object_aided_matchings > 0);
    assert!(full.mapping_audit.object_graph_queries > 0);

    let map_only = run(&records, &s, Ablation::ObjectsInMappingOnly);
    assert_eq!(map_only.tracking_audit.object_associations, 0);
    assert_eq!(map_only.tracking_audit.object_aided_matchings, 0);
    assert!(map_only.mapping_audit.object_associations > 0);
    assert!(map_only.mapping_audit.object_graph_queries > 0);
    assert!(!map_only.map.objects().is_empty());

    let odom_only = run(&records, &s, Ablation::ObjectsInOdometryOnly);
    assert_eq!(odom_only.mapping_audit.object_graph_queries, 0);
    assert!(odom_only.tracking_audit.object_associations > 0);

    let points = run(&records, &s, Ablation::PointsOnly);
    assert_eq!(points.tracking_audit.object_associations, 0);
    assert_eq!(points.tracking_audit.object_aided_matchings, 0);
    assert_eq!(points.mapping_audit.object_associations, 0);
    assert_eq!(points.mapping_audit.object_graph_queries, 0);
    assert!(points.map.objects().is_empty());

    for out in [&full, &map_only, &odom_only, &points] {
        assert_eq!(out.tracked_frames(), records.len());
        let audit = out.map.audit();
        assert!(audit.is_clean(), "{audit:?}");
    }
}

#[test]
fn second_stage_never_worsens_the_pose_on_noiseless_input() {
    let mut spec = loop_spec(13, 150, 0.5);
    spec.noise = NoiseSpec::none();
    let (s, records) = scene(&spec);
    let out = run(&records, &s, Ablation::Full);
    assert_eq!(out.tracked_frames(), records.len());
    let mut compared = 0;
    let mut not_worse = 0;
    for d in &out.diagnostics {
        let Some(stage1) = d.stage1_pose else { continue };
        let truth = odometry_truth(&records, d.frame as usize);
        let e1 = (stage1.camera_center() - truth.camera_center()).norm();
        let e2 = (d.pose.camera_center() - truth.camera_center()).norm();
        compared += 1;
        if e2 <= e1 + 1e-9 {
            not_worse += 1;
        }
    }
    assert!(compared > 100);
    assert!(not_worse as f64 >= 0.95 * compared as f64, "{not_worse}/{compared}");
}

#[test]
fn pipelined_mode_tracks_the_whole_sequence() {
    let (s, records) = scene(&loop_spec(14, 150, 0.5));
    let mut cfg = PipelineConfig::default();
    cfg.deterministic = false;
    let out = run_sequence(&records, &s.intrinsics, &cfg).unwrap();
    assert_eq!(out.tracked_frames(), records.len());
    assert!(out.map.audit().is_clean());
    let ate = ate_rmse(&out.trajectory, &groundtruth_trajectory(&records), true).unwrap();
    assert!(ate < 0.05, "ate {ate}");
}

/// Lap bookkeeping for a loop walk, from timestamps.
struct Laps {
    lap_seconds: f64,
}

impl Laps {
    fn lap(&self, t: f64) -> usize {
        (t / self.lap_seconds) as usize
    }

    fn phase(&self, t: f64) -> f64 {
        (t / self.lap_seconds).fract()
    }

    fn same_place(&self, a: f64, b: f64, window: f64) -> bool {
        let d = (self.phase(a) - self.phase(b)).abs();
        d.min(1.0 - d) < window
    }
}

/// Per second-lap keyframe, at insertion time and before mapping: whether
/// its object-graph and point-graph neighbors reach a first-lap keyframe at
/// the same place on the loop.
fn revisit_links(records: &[FrameRecord], s: &Scene, cfg: &PipelineConfig, laps: &Laps) -> (usize, usize, usize) {
    let mut map = Map::new();
    let mut tracker = Tracker::new(cfg, s.intrinsics);
    let mut mapper = Mapper::new(cfg, s.intrinsics);
    let (mut revisits, mut by_objects, mut by_points) = (0, 0, 0);
    for record in records {
        let mut frame = Frame::from_record(record, &s.intrinsics, cfg.tracking.min_confidence);
        let out = tracker.process_frame(&mut frame, &map).expect("tracking holds");
        let Some(kf) = out.keyframe else { continue };
        let t = kf.timestamp;
        let id = map.insert_keyframe(kf).unwrap();
        if laps.lap(t) == 1 {
            let first_pass: BTreeSet<KeyFrameId> = map
                .keyframes()
                .values()
                .filter(|k| laps.lap(k.timestamp) == 0 && laps.same_place(k.timestamp, t, 0.1))
                .map(|k| k.id)
                .collect();
            revisits += 1;
            if map.object_covisibility_neighbors(id).iter().any(|n| first_pass.contains(n)) {
                by_objects += 1;
            }
            if map.point_covisibility_neighbors(id, 15).iter().any(|n| first_pass.contains(n)) {
                by_points += 1;
            }
        }
        mapper.step(&mut map, id).unwrap();
    }
    (revisits, by_objects, by_points)
}

#[test]
fn object_graph_links_revisits_to_the_first_pass() {
    let spec = loop_spec(15, 600, 2.0);
    let (s, records) = scene(&spec);
    let laps = Laps { lap_seconds: 300.0 / spec.frame_rate };

    let (revisits, by_objects, _) = revisit_links(&records, &s, &PipelineConfig::default(), &laps);
    assert!(revisits > 10);
    assert_eq!(by_objects, revisits);

    let (revisits, _, by_points) = revisit_links(&records, &s, &PipelineConfig::with_ablation(Ablation::PointsOnly), &laps);
    eprintln!("points only: {by_points} of {revisits} revisits linked");
    assert!(2 * by_points < revisits);
}

#[test]
fn full_system_beats_odometry_only_after_the_revisit() {
    let spec = loop_spec(16, 450, 1.5);
    let (s, records) = scene(&spec);
    let truth = groundtruth_trajectory(&records);
    let lap = 300.0 / spec.frame_rate;
    let post = |out: &RunOutput| {
        let est: Vec<TumPose> = out.trajectory.iter().filter(|p| p.timestamp >= lap).copied().collect();
        ate_rmse(&est, &truth, true).unwrap()
    };
    let full = run(&records, &s, Ablation::Full);
    let odom = run(&records, &s, Ablation::ObjectsInOdometryOnly);
    let (f, o) = (post(&full), post(&odom));
    eprintln!("post-revisit ate: full {f:.5}, odom {o:.5}");
    assert!(f < o, "full {f} odom {o}");
}

#[test]
fn da4_matches_degrade_monotonically_with_pose_error() {
    let spec = SceneSpec { seed: 17, frames: 60, ..SceneSpec::default() };
    let (s, records) = scene(&spec);
    let counts: Vec<usize> = [0.0, 1.0, 2.0, 4.0, 8.0]
        .iter()
        .map(|&level| matches_under_pose_perturbation(&s, &records, AssociationMethod::Da4, level, 0.02, 3))
        .collect();
    eprintln!("{counts:?}");
    assert!(counts[0] > 0);
    assert!(counts.windows(2).all(|w| w[1] <= w[0]), "{counts:?}");
    assert!(counts[4] < counts[0]);
}
