use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nas3r_core::ba::{evaluate_loss, BAConfig};
use nas3r_core::render::{render, RenderConfig};
use nas3r_core::scene::{generate_scene, SceneKind, SceneSpec};

fn scene(size: usize) -> nas3r_core::scene::GeneratedScene {
    let spec = SceneSpec {
        kind: SceneKind::GaussianCloud,
        primitives: 2000,
        width: size,
        height: size,
        fov_deg: 90.0,
        near: 0.2,
        far: 4.0,
        ..SceneSpec::default()
    };
    generate_scene(&spec, 1).expect("bench scene generates")
}

fn forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("render_forward");
    group.sample_size(20);
    for size in [64, 128] {
        let s = scene(size);
        for (label, parallel) in [("parallel", true), ("sequential", false)] {
            let cfg = RenderConfig {
                parallel,
                ..RenderConfig::default()
            };
            group.bench_with_input(BenchmarkId::new(label, size), &cfg, |b, cfg| {
                b.iter(|| render(&s.gaussians, &s.intrinsics, &s.poses[2], [0.0; 3], cfg).unwrap())
            });
        }
    }
    group.finish();
}

fn forward_backward(c: &mut Criterion) {
    let mut group = c.benchmark_group("loss_and_gradient");
    group.sample_size(10);
    let s = scene(64);
    let params = nas3r_core::params::SceneParameters::from_gaussians(
        &s.gaussians,
        &s.intrinsics,
        &[s.poses[0], s.poses[2]],
        1,
        s.spec.near,
        s.spec.far,
    )
    .unwrap();
    let sup = vec![(1, s.images[3].clone())];
    for (label, parallel) in [("parallel", true), ("sequential", false)] {
        let mut cfg = BAConfig::default();
        cfg.render.parallel = parallel;
        group.bench_function(label, |b| b.iter(|| evaluate_loss(&params, &sup, &cfg, true).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, forward, forward_backward);
criterion_main!(benches);
