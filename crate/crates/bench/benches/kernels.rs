use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use hierslam_bench::{association_problem, camera, contour, pose_problem};
use hierslam_core::association::{associate_projected, AssociationConfig, AssociationMethod};
use hierslam_core::geometry::{ellipse_to_gaussian, fit_ellipse};
use hierslam_core::metrics::{normalized_wasserstein, MetricConfig};
use hierslam_core::optimize::{optimize_pose, SolverConfig};

fn metrics(c: &mut Criterion) {
    let a = ellipse_to_gaussian(&fit_ellipse(&contour(1)).unwrap());
    let b = ellipse_to_gaussian(&fit_ellipse(&contour(2)).unwrap());
    let cfg = MetricConfig::default();
    c.bench_function("normalized_wasserstein", |bench| bench.iter(|| normalized_wasserstein(black_box(&a), black_box(&b), &cfg)));
}

fn ellipse_fit(c: &mut Criterion) {
    let pts = contour(3);
    c.bench_function("fit_ellipse_64", |b| b.iter(|| fit_ellipse(black_box(&pts)).unwrap()));
}

fn pose(c: &mut Criterion) {
    let k = camera();
    let mut group = c.benchmark_group("optimize_pose");
    for n in [50, 200, 800] {
        let (_, init, obs) = pose_problem(n, 4);
        let cfg = SolverConfig::pose().with_depth(40.0);
        group.bench_with_input(BenchmarkId::from_parameter(n), &obs, |b, obs| {
            b.iter(|| optimize_pose(&init, black_box(obs), &k, &cfg).unwrap())
        });
    }
    group.finish();
}

fn association(c: &mut Criterion) {
    let mut group = c.benchmark_group("associate_objects");
    let (dets, objs) = association_problem(20, 5);
    for method in AssociationMethod::ALL {
        let cfg = AssociationConfig::with_method(method);
        group.bench_function(method.label(), |b| b.iter(|| associate_projected(black_box(&dets), black_box(&objs), &cfg)));
    }
    group.finish();
}

criterion_group!(benches, metrics, ellipse_fit, pose, association);
criterion_main!(benches);
