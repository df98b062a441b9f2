use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use geomanifold::estimators::pca_covariance;
use geomanifold::harness::{synth_scene, SceneSpec};
use geomanifold::manifold::{se3_exp, Mat3, Twist6};
use geomanifold::matching::{gicp_align, MatchOptions};
use geomanifold::registration::{build_constraints, build_cost, register, solve_sdp, DEFAULT_SDP_TOL};
use geomanifold::{MatchedPairs, PointCloud, Vec3};

fn instance(n: usize, seed: u64) -> (MatchedPairs, Vec<Mat3>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pose = se3_exp(&Twist6::from_slice(&std::array::from_fn(|_| rng.random_range(-0.8..0.8))));
    let src: Vec<Vec3> = (0..n).map(|_| Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0))).collect();
    let tgt: Vec<Vec3> = src
        .iter()
        .map(|p| pose.transform_point(p) + Vec3::from_fn(|_, _| rng.random_range(-0.01..0.01)))
        .collect();
    let covs = (0..n).map(|_| Mat3::from_diagonal(&Vec3::new(0.01, 0.01, 1e-4))).collect();
    (MatchedPairs::new(src, tgt).unwrap(), covs)
}

fn bench_register(c: &mut Criterion) {
    let mut group = c.benchmark_group("register");
    for n in [20, 100, 500] {
        let (pairs, covs) = instance(n, n as u64);
        group.bench_with_input(BenchmarkId::new("pose", n), &n, |b, _| {
            b.iter(|| register(black_box(&pairs), black_box(&covs), false).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("pose_and_gradient", n), &n, |b, _| {
            b.iter(|| register(black_box(&pairs), black_box(&covs), true).unwrap())
        });
    }
    group.finish();
}

fn bench_sdp(c: &mut Criterion) {
    let (pairs, covs) = instance(50, 7);
    let weights: Vec<Mat3> = covs.iter().map(|c| (2.0 * c).try_inverse().unwrap()).collect();
    let q = build_cost(&pairs, &weights).unwrap();
    let constraints = build_constraints();
    c.bench_function("solve_sdp", |b| b.iter(|| solve_sdp(black_box(&q), &constraints, DEFAULT_SDP_TOL).unwrap()));
}

fn bench_gicp(c: &mut Criterion) {
    let spec = SceneSpec { max_rotation_deg: 10.0, max_translation: 0.2, ..SceneSpec::planar() };
    let scene = synth_scene(&spec, 3).unwrap();
    let target = scene.target.clone();
    let source = PointCloud::new(scene.source.points.iter().step_by(4).copied().collect());
    let tgt_covs = pca_covariance(&target, 12).unwrap();
    let src_covs = pca_covariance(&source, 12).unwrap();
    let opts = MatchOptions { max_correspondence_distance: Some(1.0), ..MatchOptions::default() };
    c.bench_function("gicp_align", |b| {
        b.iter(|| gicp_align(&source, &target, &src_covs, &tgt_covs, black_box(&scene.observed_pose), &opts).unwrap())
    });
    c.bench_function("pca_covariance_k24", |b| b.iter(|| pca_covariance(black_box(&target), 24).unwrap()));
}

criterion_group!(benches, bench_register, bench_sdp, bench_gicp);
criterion_main!(benches);
