use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use zest_core::metrics;
use zest_core::model::Model;
use zest_core::par;
use zest_core::synthetic::{SyntheticScene, SyntheticSceneSpec};
use zest_core::TrainConfig;

fn render_view(c: &mut Criterion) {
    let scene = SyntheticScene::new(SyntheticSceneSpec::toy(), 0).unwrap();
    let bundle = scene.bundle();
    let model = Model::new(&TrainConfig::toy()).unwrap();
    let cam = scene.heldout_camera(5);
    let mut group = c.benchmark_group("render_view");
    group.sample_size(10);
    for parallel in [false, true] {
        let label = if parallel { "parallel" } else { "sequential" };
        group.bench_with_input(BenchmarkId::from_parameter(label), &parallel, |b, &p| {
            par::set_parallel(p);
            b.iter(|| model.render_view(&bundle, 5, &cam, 512).unwrap());
        });
    }
    group.finish();
}

fn ssim(c: &mut Criterion) {
    let scene = SyntheticScene::new(SyntheticSceneSpec::default(), 0).unwrap();
    let a = scene.render_gt(&scene.frame_camera(0), 0.0);
    let b = scene.render_gt(&scene.frame_camera(1), 1.0);
    let mut group = c.benchmark_group("ssim");
    for parallel in [false, true] {
        let label = if parallel { "parallel" } else { "sequential" };
        group.bench_with_input(BenchmarkId::from_parameter(label), &parallel, |bench, &p| {
            par::set_parallel(p);
            bench.iter(|| metrics::ssim(&a, &b).unwrap());
        });
    }
    group.finish();
    par::set_parallel(true);
}

criterion_group!(benches, render_view, ssim);
criterion_main!(benches);
