//! Deterministic synthetic scenes: ellipsoidal objects with surface points,
//! background points, a camera trajectory, and per-frame keypoints and
//! instance contours with configurable noise.

use std::f64::consts::PI;

use nalgebra::{Matrix3, UnitQuaternion, Vector2, Vector3};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::features::Descriptor;
use crate::geometry::{
    ellipse_bbox, ellipsoid_to_dual_quadric, gaussian_to_ellipse, project_dual_quadric_gaussian, BBox, Ellipse2D,
    Ellipsoid, Intrinsics, Pose,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimError {
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraSpec {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Default for CameraSpec {
    fn default() -> Self {
        Self { fx: 525.0, fy: 525.0, cx: 319.5, cy: 239.5, width: 640, height: 480 }
    }
}

impl CameraSpec {
    pub fn intrinsics(&self) -> Result<Intrinsics, SimError> {
        Intrinsics::new(self.fx, self.fy, self.cx, self.cy, self.width, self.height)
            .map_err(|e| SimError::InvalidSpec(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectSpec {
    pub count: usize,
    pub categories: u32,
    pub min_axis: f64,
    pub max_axis: f64,
    /// Objects are placed on the floor inside this radius around the origin.
    pub cluster_radius: f64,
    pub points_per_object: usize,
}

impl Default for ObjectSpec {
    fn default() -> Self {
        Self { count: 12, categories: 8, min_axis: 0.12, max_axis: 0.35, cluster_radius: 1.6, points_per_object: 60 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TrajectorySpec {
    /// Circle around the object cluster, always looking at its center.
    Orbit { radius: f64, height: f64, laps: f64 },
    /// A wobbling walk around the cluster that returns to its start after
    /// every lap, with smoothed hand-held jitter.
    LoopWalk { radius: f64, height: f64, laps: f64, jitter: f64, jitter_rot: f64 },
    /// Constant-velocity sideways pass in front of the cluster.
    Straight { length: f64, distance: f64, height: f64, jitter: f64 },
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        Self::LoopWalk { radius: 3.5, height: 1.3, laps: 3.0, jitter: 0.002, jitter_rot: 0.001 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    pub keypoint_px: f64,
    pub contour_px: f64,
    /// Depth noise σ = `depth_coeff · z²`.
    pub depth_coeff: f64,
    pub dropout: f64,
    pub misclassification: f64,
    /// Probability per frame of one spurious detection.
    pub outlier_detection: f64,
    pub bit_flips: usize,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            keypoint_px: 1.0,
            contour_px: 1.0,
            depth_coeff: 0.004,
            dropout: 0.05,
            misclassification: 0.05,
            outlier_detection: 0.02,
            bit_flips: 8,
        }
    }
}

impl NoiseSpec {
    pub fn none() -> Self {
        Self {
            keypoint_px: 0.0,
            contour_px: 0.0,
            depth_coeff: 0.0,
            dropout: 0.0,
            misclassification: 0.0,
            outlier_detection: 0.0,
            bit_flips: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    pub frames: usize,
    pub frame_rate: f64,
    pub camera: CameraSpec,
    pub objects: ObjectSpec,
    pub background_points: usize,
    /// Background points lie on a cylindrical wall of this radius and on the floor inside it.
    pub wall_radius: f64,
    pub max_depth: f64,
    /// Smallest projected minor semi-axis (pixels) that still yields a detection.
    pub min_detection_px: f64,
    pub trajectory: TrajectorySpec,
    pub noise: NoiseSpec,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            frames: 1000,
            frame_rate: 30.0,
            camera: CameraSpec::default(),
            objects: ObjectSpec::default(),
            background_points: 900,
            wall_radius: 8.0,
            max_depth: 14.0,
            min_detection_px: 3.0,
            trajectory: TrajectorySpec::default(),
            noise: NoiseSpec::default(),
        }
    }
}

impl SceneSpec {
    pub fn from_toml(text: &str) -> Result<Self, SimError> {
        let spec: SceneSpec = toml::from_str(text).map_err(|e| SimError::InvalidSpec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scene spec serializes")
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidSpec(m.to_string()));
        self.camera.intrinsics()?;
        let n = &self.noise;
        for (name, r) in [
            ("dropout", n.dropout),
            ("misclassification", n.misclassification),
            ("outlier_detection", n.outlier_detection),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return bad(&format!("{name} must be in [0, 1]"));
            }
        }
        if [n.keypoint_px, n.contour_px, n.depth_coeff].iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return bad("noise sigmas must be non-negative");
        }
        if n.bit_flips > Descriptor::BITS {
            return bad("bit_flips exceeds descriptor length");
        }
        if self.frames < 2 {
            return bad("need at least 2 frames");
        }
        if !(self.frame_rate > 0.0) {
            return bad("frame_rate must be positive");
        }
        let o = &self.objects;
        if !(o.min_axis > 0.0 && o.max_axis >= o.min_axis) || o.categories == 0 {
            return bad("object axes/categories");
        }
        if !(self.wall_radius > 0.0 && self.max_depth > 0.0) {
            return bad("wall_radius and max_depth must be positive");
        }
        match self.trajectory {
            TrajectorySpec::Orbit { radius, laps, .. } | TrajectorySpec::LoopWalk { radius, laps, .. } => {
                if !(radius > o.cluster_radius && radius < self.wall_radius && laps > 0.0) {
                    return bad("trajectory radius must lie between the cluster and the wall");
                }
            }
            TrajectorySpec::Straight { length, distance, .. } => {
                if !(length > 0.0 && distance > 0.0) {
                    return bad("straight trajectory length/distance");
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: u64,
    pub category: u32,
    pub ellipsoid: Ellipsoid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub id: u64,
    pub position: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub descriptor: Descriptor,
    /// Owning object, for points sampled on an object surface.
    pub object: Option<u64>,
}

/// Ground-truth world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub intrinsics: Intrinsics,
    pub frame_rate: f64,
    #[serde(default)]
    pub objects: Vec<SceneObject>,
    #[serde(default)]
    pub landmarks: Vec<Landmark>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointRecord {
    pub u: f64,
    pub v: f64,
    pub depth: Option<f64>,
    pub descriptor: Descriptor,
    /// Source landmark (ground truth; absent for real data).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub landmark: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub category: u32,
    pub confidence: f64,
    /// Flat `[u0, v0, u1, v1, …]` contour.
    pub contour: Vec<f64>,
    /// Source object (ground truth; absent for spurious or real detections).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object: Option<u64>,
}

impl DetectionRecord {
    pub fn contour_points(&self) -> Vec<Vector2<f64>> {
        self.contour.chunks_exact(2).map(|c| Vector2::new(c[0], c[1])).collect()
    }
}

/// One frame of sensor input plus ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub id: u64,
    pub timestamp: f64,
    /// Ground-truth camera pose as `[tx, ty, tz, qx, qy, qz, qw]`
    /// (world-from-camera, as in TUM files).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub groundtruth: Option<[f64; 7]>,
    pub keypoints: Vec<KeypointRecord>,
    pub detections: Vec<DetectionRecord>,
}

/// Camera-from-world pose to the `[t, q]` world-from-camera array.
pub fn pose_to_tum(pose: &Pose) -> [f64; 7] {
    let inv = pose.inverse();
    let t = inv.translation();
    let q = inv.quaternion();
    [t.x, t.y, t.z, q.i, q.j, q.k, q.w]
}

pub fn pose_from_tum(v: &[f64; 7]) -> Pose {
    let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(v[6], v[3], v[4], v[5]));
    Pose::from_quaternion(&q, Vector3::new(v[0], v[1], v[2])).inverse()
}

impl FrameRecord {
    pub fn groundtruth_pose(&self) -> Option<Pose> {
        self.groundtruth.as_ref().map(pose_from_tum)
    }
}

/// Camera whose optical axis points from `center` to `target`, with image
/// rows aligned to world −z.
pub fn look_at(center: &Vector3<f64>, target: &Vector3<f64>) -> Pose {
    let fwd = (target - center).normalize();
    let up = Vector3::z();
    let right = fwd.cross(&up).normalize();
    let down = fwd.cross(&right);
    Pose::from_camera_center(&Matrix3::from_columns(&[right, down, fwd]), center)
}

fn unit_ball(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        if v.norm_squared() <= 1.0 {
            return v;
        }
    }
}

fn unit_sphere(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = unit_ball(rng);
        let n = v.norm();
        if n > 1e-3 {
            return v / n;
        }
    }
}

/// Ground-truth camera poses (camera-from-world) for every frame.
pub fn trajectory(spec: &SceneSpec) -> Vec<Pose> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(2);
    let n = spec.frames;
    let target_height = 0.25;
    let mut v = Vector3::zeros();
    let mut w = Vector3::zeros();
    let mut offset = Vector3::zeros();
    let mut rot = Vector3::zeros();
    // Smoothed jitter: the per-frame velocity is half the previous one plus
    // a fresh draw from a ball of radius `jitter`. `revert` < 1 pulls the
    // accumulated offset back toward the nominal path.
    let mut jittered = |rng: &mut ChaCha8Rng, jitter: f64, jitter_rot: f64, revert: f64| {
        v = v * 0.5 + unit_ball(rng) * jitter;
        w = w * 0.5 + unit_ball(rng) * jitter_rot;
        offset = offset * revert + v;
        rot = rot * revert + w;
        (offset, rot)
    };
    (0..n)
        .map(|i| {
            let s = i as f64 / n as f64;
            match spec.trajectory {
                TrajectorySpec::Orbit { radius, height, laps } => {
                    let a = 2.0 * PI * laps * s;
                    let c = Vector3::new(radius * a.cos(), radius * a.sin(), height);
                    look_at(&c, &Vector3::new(0.0, 0.0, target_height))
                }
                TrajectorySpec::LoopWalk { radius, height, laps, jitter, jitter_rot } => {
                    let a = 2.0 * PI * laps * s;
                    let r = radius * (1.0 + 0.12 * (2.0 * a).sin());
                    let c = Vector3::new(r * a.cos(), r * a.sin(), height + 0.1 * (3.0 * a).sin());
                    let target = Vector3::new(0.4 * (a + 1.0).cos(), 0.4 * (2.0 * a).sin(), target_height);
                    let (dp, dr) = jittered(&mut rng, jitter, jitter_rot, 0.97);
                    let base = look_at(&(c + dp), &target);
                    let rj = UnitQuaternion::from_scaled_axis(dr).to_rotation_matrix().into_inner();
                    Pose::new(rj * base.rotation(), rj * base.translation()).expect("rotation")
                }
                TrajectorySpec::Straight { length, distance, height, jitter } => {
                    let c = Vector3::new(-0.5 * length + length * s, -distance, height);
                    let (dp, _) = jittered(&mut rng, jitter, 0.0, 1.0);
                    let wfc = Matrix3::from_columns(&[Vector3::x(), -Vector3::z(), Vector3::y()]);
                    Pose::from_camera_center(&wfc, &(c + dp))
                }
            }
        })
        .collect()
}

/// Builds the ground-truth world.
pub fn generate_world(spec: &SceneSpec) -> Result<Scene, SimError> {
    spec.validate()?;
    let intrinsics = spec.camera.intrinsics()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let os = &spec.objects;
    let mut objects: Vec<SceneObject> = Vec::new();
    let mut attempts = 0;
    while objects.len() < os.count {
        attempts += 1;
        if attempts > 10_000 {
            return Err(SimError::InvalidSpec("objects do not fit in the cluster".into()));
        }
        let axes = Vector3::from_fn(|_, _| rng.random_range(os.min_axis..=os.max_axis));
        let r = os.cluster_radius * rng.random::<f64>().sqrt();
        let a = rng.random_range(0.0..2.0 * PI);
        let center = Vector3::new(r * a.cos(), r * a.sin(), axes.z);
        let bound = axes.max();
        if objects.iter().any(|o| {
            let d = (o.ellipsoid.center - center).xy().norm();
            d < bound + o.ellipsoid.semi_axes.max() + 0.08
        }) {
            continue;
        }
        let yaw = rng.random_range(-PI..PI);
        let rotation = UnitQuaternion::from_euler_angles(0.0, 0.0, yaw).to_rotation_matrix().into_inner();
        let ellipsoid = Ellipsoid::new(center, axes, rotation).expect("valid ellipsoid");
        let category = rng.random_range(0..os.categories);
        objects.push(SceneObject { id: objects.len() as u64, category, ellipsoid });
    }
    let mut landmarks = Vec::new();
    let mut push = |position: Vector3<f64>, normal: Vector3<f64>, object: Option<u64>, rng: &mut ChaCha8Rng| {
        landmarks.push(Landmark { id: landmarks.len() as u64, position, normal, descriptor: Descriptor(rng.random()), object });
    };
    for o in &objects {
        let e = &o.ellipsoid;
        for _ in 0..os.points_per_object {
            let u = unit_sphere(&mut rng);
            let p = e.center + e.rotation * u.component_mul(&e.semi_axes);
            let n = (e.rotation * u.component_div(&e.semi_axes)).normalize();
            push(p, n, Some(o.id), &mut rng);
        }
    }
    for _ in 0..spec.background_points {
        if rng.random::<f64>() < 0.7 {
            let a = rng.random_range(0.0..2.0 * PI);
            let z = rng.random_range(0.0..3.0);
            let p = Vector3::new(spec.wall_radius * a.cos(), spec.wall_radius * a.sin(), z);
            push(p, -Vector3::new(a.cos(), a.sin(), 0.0), None, &mut rng);
        } else {
            let r = spec.wall_radius * rng.random::<f64>().sqrt();
            let a = rng.random_range(0.0..2.0 * PI);
            push(Vector3::new(r * a.cos(), r * a.sin(), 0.0), Vector3::z(), None, &mut rng);
        }
    }
    Ok(Scene { intrinsics, frame_rate: spec.frame_rate, objects, landmarks })
}

fn occluded(objects: &[SceneObject], origin: &Vector3<f64>, target: &Vector3<f64>) -> bool {
    let d = target - origin;
    let dist = d.norm();
    let dir = d / dist;
    objects.iter().any(|o| o.ellipsoid.ray_hit(origin, &dir).is_some_and(|t| t < dist * (1.0 - 1e-6) - 1e-6))
}

/// Landmark ids visible from `pose` (in front, inside the image, facing the
/// camera, within range, not hidden by an object).
pub fn visible_landmarks(scene: &Scene, pose: &Pose, max_depth: f64) -> Vec<usize> {
    let k = &scene.intrinsics;
    let c = pose.camera_center();
    scene
        .landmarks
        .iter()
        .enumerate()
        .filter(|(_, l)| {
            let pc = pose.transform(&l.position);
            if pc.z < 0.1 || pc.z > max_depth || !k.contains(&k.project(&pc), 1.0) {
                return false;
            }
            let to_cam = (c - l.position).normalize();
            l.normal.dot(&to_cam) > 0.15 && !occluded(&scene.objects, &c, &l.position)
        })
        .map(|(i, _)| i)
        .collect()
}

/// Noise-free projected ellipse of a ground-truth object, if it would be
/// detected from `pose`.
pub fn projected_object(scene: &Scene, obj: &SceneObject, pose: &Pose, min_px: f64) -> Option<Ellipse2D> {
    let k = &scene.intrinsics;
    let pc = pose.transform(&obj.ellipsoid.center);
    if pc.z < 0.3 {
        return None;
    }
    let g = project_dual_quadric_gaussian(&ellipsoid_to_dual_quadric(&obj.ellipsoid), pose, k).ok()?;
    let e = gaussian_to_ellipse(&g).ok()?;
    if e.semi_axes[1] < min_px || !k.contains(&e.center, 0.0) {
        return None;
    }
    // Mostly hidden behind another object.
    let c = pose.camera_center();
    let others: Vec<SceneObject> = scene.objects.iter().filter(|o| o.id != obj.id).cloned().collect();
    if occluded(&others, &c, &obj.ellipsoid.center) {
        return None;
    }
    Some(e)
}

fn clamp_to_image(p: Vector2<f64>, k: &Intrinsics) -> Vector2<f64> {
    Vector2::new(p.x.clamp(0.0, k.width as f64 - 1.0), p.y.clamp(0.0, k.height as f64 - 1.0))
}

fn flip_bits(d: &Descriptor, n: usize, rng: &mut ChaCha8Rng) -> Descriptor {
    let mut out = *d;
    for b in sample(rng, Descriptor::BITS, n) {
        out.flip(b);
    }
    out
}

fn gaussian(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma == 0.0 {
        0.0
    } else {
        Normal::new(0.0, sigma).expect("sigma ≥ 0").sample(rng)
    }
}

/// Renders one frame.
pub fn render_frame(scene: &Scene, spec: &SceneSpec, id: u64, pose: &Pose, rng: &mut ChaCha8Rng) -> FrameRecord {
    let k = &scene.intrinsics;
    let n = &spec.noise;
    let mut keypoints = Vec::new();
    for i in visible_landmarks(scene, pose, spec.max_depth) {
        let l = &scene.landmarks[i];
        let pc = pose.transform(&l.position);
        let uv = k.project(&pc) + Vector2::new(gaussian(rng, n.keypoint_px), gaussian(rng, n.keypoint_px));
        let depth = pc.z + gaussian(rng, n.depth_coeff * pc.z * pc.z);
        let descriptor = flip_bits(&l.descriptor, n.bit_flips, rng);
        if !k.contains(&uv, 0.0) {
            continue;
        }
        keypoints.push(KeypointRecord { u: uv.x, v: uv.y, depth: Some(depth.max(0.05)), descriptor, landmark: Some(l.id) });
    }
    let mut detections = Vec::new();
    for obj in &scene.objects {
        let Some(e) = projected_object(scene, obj, pose, spec.min_detection_px) else { continue };
        let dropped = rng.random::<f64>() < n.dropout;
        let misclassified = rng.random::<f64>() < n.misclassification;
        let confidence = rng.random_range(0.2..=1.0);
        let contour: Vec<f64> = e
            .sample_outline(64)
            .into_iter()
            .flat_map(|p| {
                let q = clamp_to_image(p + Vector2::new(gaussian(rng, n.contour_px), gaussian(rng, n.contour_px)), k);
                [q.x, q.y]
            })
            .collect();
        if dropped {
            continue;
        }
        let category = if misclassified && spec.objects.categories > 1 {
            (obj.category + rng.random_range(1..spec.objects.categories)) % spec.objects.categories
        } else {
            obj.category
        };
        detections.push(DetectionRecord { category, confidence, contour, object: Some(obj.id) });
    }
    if rng.random::<f64>() < n.outlier_detection {
        let center = Vector2::new(rng.random_range(40.0..k.width as f64 - 40.0), rng.random_range(40.0..k.height as f64 - 40.0));
        let axes = Vector2::new(rng.random_range(15.0..60.0), rng.random_range(8.0..15.0));
        let e = Ellipse2D::new(center, axes, rng.random_range(-PI / 2.0..PI / 2.0)).expect("positive axes");
        detections.push(DetectionRecord {
            category: rng.random_range(0..spec.objects.categories),
            confidence: rng.random_range(0.2..=1.0),
            contour: e.sample_outline(64).into_iter().flat_map(|p| [p.x, p.y]).collect(),
            object: None,
        });
    }
    FrameRecord {
        id,
        timestamp: id as f64 / spec.frame_rate,
        groundtruth: Some(pose_to_tum(pose)),
        keypoints,
        detections,
    }
}

/// Generates the world and the full frame stream.
pub fn generate_scene(spec: &SceneSpec) -> Result<(Scene, Vec<FrameRecord>), SimError> {
    let scene = generate_world(spec)?;
    let poses = trajectory(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1);
    let frames = poses
        .iter()
        .enumerate()
        .map(|(i, pose)| render_frame(&scene, spec, i as u64, pose, &mut rng))
        .collect();
    Ok((scene, frames))
}

/// Tight image-space box of a projected ground-truth object (diagnostics).
pub fn object_bbox(scene: &Scene, obj: &SceneObject, pose: &Pose) -> Option<BBox> {
    projected_object(scene, obj, pose, 0.0).map(|e| ellipse_bbox(&e))
}
