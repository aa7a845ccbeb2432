//! Deterministic inputs for the benchmarks.

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hierslam_core::association::ProjectedObject;
use hierslam_core::features::Detection;
use hierslam_core::geometry::{ellipse_to_gaussian, Ellipse2D, Intrinsics, Pose};
use hierslam_core::optimize::PoseObservation;
use hierslam_core::sim::{generate_scene, FrameRecord, Scene, SceneSpec};
use hierslam_core::ObjectId;

pub fn camera() -> Intrinsics {
    Intrinsics::new(525.0, 525.0, 319.5, 239.5, 640, 480).expect("valid intrinsics")
}

pub fn random_ellipse(rng: &mut ChaCha8Rng) -> Ellipse2D {
    let center = Vector2::new(rng.random_range(60.0..580.0), rng.random_range(60.0..420.0));
    let a = rng.random_range(10.0..60.0);
    let b = rng.random_range(5.0..a);
    Ellipse2D::new(center, Vector2::new(a, b), rng.random_range(-1.5..1.5)).expect("positive axes")
}

/// A noisy 64-point outline of a random ellipse.
pub fn contour(seed: u64) -> Vec<Vector2<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let e = random_ellipse(&mut rng);
    e.sample_outline(64)
        .into_iter()
        .map(|p| p + Vector2::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)))
        .collect()
}

/// `n` exact correspondences seen from `truth`, with an initial guess offset
/// from it.
pub fn pose_problem(n: usize, seed: u64) -> (Pose, Pose, Vec<PoseObservation>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = camera();
    let truth = Pose::exp(&nalgebra::Vector6::new(0.1, -0.2, 0.3, 0.05, -0.1, 0.02));
    let world = truth.inverse();
    let obs = (0..n)
        .map(|_| {
            let pc = Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-1.5..1.5), rng.random_range(1.0..8.0));
            PoseObservation { pixel: k.project(&pc), point: world.transform(&pc), depth: Some(pc.z) }
        })
        .collect();
    let init = truth.retract_left(&nalgebra::Vector6::new(0.02, -0.01, 0.02, 0.01, 0.005, -0.01));
    (truth, init, obs)
}

/// `n` detections and `n` projected landmarks scattered over the image.
pub fn association_problem(n: usize, seed: u64) -> (Vec<Detection>, Vec<ProjectedObject>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = camera();
    let mut detections = Vec::new();
    let mut objects = Vec::new();
    for i in 0..n {
        let e = random_ellipse(&mut rng);
        let category = rng.random_range(0..5);
        detections.push(Detection::from_contour(category, 0.9, e.sample_outline(64), &[], &k).expect("fits"));
        let mut g = ellipse_to_gaussian(&e);
        g.mean += Vector2::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        objects.push(ProjectedObject::from_gaussian(ObjectId(i as u64), category, g).expect("valid"));
    }
    (detections, objects)
}

/// A short default synthetic sequence.
pub fn sequence(frames: usize, seed: u64) -> (Scene, Vec<FrameRecord>) {
    generate_scene(&SceneSpec { seed, frames, ..SceneSpec::default() }).expect("valid scene")
}
