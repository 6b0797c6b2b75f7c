use nas3r_core::ba::{
    evaluate_loss, init_scene_parameters, optimize, optimize_with_observer, BAConfig, FovInit, GroundTruth, PerceptualKind,
};
use nas3r_core::geometry::{axis_angle, CameraPose, Vec3};
use nas3r_core::image::Image;
use nas3r_core::params::{ParamClass, SceneParameters};
use nas3r_core::render::render_view;
use nas3r_core::scene::{generate_scene, shipped_scenes, GeneratedScene, SceneSpec};
use proptest::prelude::*;

fn small_scene() -> GeneratedScene {
    let spec = SceneSpec {
        width: 24,
        height: 20,
        frames: 3,
        primitives: 60,
        ..SceneSpec::default()
    };
    generate_scene(&spec, 2).unwrap()
}

fn two_view(s: &GeneratedScene, target: usize) -> SceneParameters {
    SceneParameters::from_gaussians(&s.gaussians, &s.intrinsics, &[s.poses[0], s.poses[target]], 1, s.spec.near, s.spec.far).unwrap()
}

#[test]
fn window_minimum_never_rises_on_shipped_scenes() {
    let scenes = shipped_scenes();
    std::thread::scope(|sc| {
        for (name, spec, seed) in &scenes {
            sc.spawn(move || {
                let s = generate_scene(spec, *seed).unwrap();
                let last = s.images.len() - 1;
                let init = init_scene_parameters(&s.images[..1], 1, FovInit::FullImage, spec.near, spec.far, 0).unwrap();
                let cfg = BAConfig {
                    max_steps: 300,
                    ..BAConfig::default()
                };
                let res = optimize(init, &[(1, s.images[last].clone())], &cfg, &GroundTruth::default()).unwrap();
                let losses: Vec<f64> = res.history.iter().map(|h| h.loss).collect();
                let mins: Vec<f64> = losses.chunks_exact(100).map(|w| w.iter().copied().fold(f64::INFINITY, f64::min)).collect();
                assert!(mins.windows(2).all(|m| m[1] <= m[0]), "{name}: {mins:?}");
                assert!(res.best_loss <= losses[0], "{name}");
            });
        }
    });
}

#[test]
fn canonical_view_stays_identity_and_frozen_fov_is_bitwise() {
    let s = small_scene();
    let init = init_scene_parameters(&s.images[..1], 2, FovInit::FullImage, 0.1, 10.0, 0).unwrap();
    let fov_bits = init.fov_rad.to_bits();
    let cfg = BAConfig {
        lr: 1e-3,
        max_steps: 25,
        freeze: vec![ParamClass::Fov],
        ..BAConfig::default()
    };
    let sup = vec![(1, s.images[1].clone()), (2, s.images[2].clone())];
    let res = optimize_with_observer(init, &sup, &cfg, &GroundTruth::default(), |_, p| {
        assert_eq!(p.pose(0).unwrap(), CameraPose::identity());
        assert_eq!(p.fov_rad.to_bits(), fov_bits);
    })
    .unwrap();
    assert_eq!(res.params.fov_rad.to_bits(), fov_bits);
    assert_eq!(res.params.pose(0).unwrap(), CameraPose::identity());
    assert!(res.params.pose(1).unwrap() != CameraPose::identity());
}

#[test]
fn perfect_initialization_has_zero_gradient() {
    let s = small_scene();
    let p = two_view(&s, 2);
    for perceptual in [PerceptualKind::None, PerceptualKind::Ssim] {
        let cfg = BAConfig {
            gamma: 0.0,
            perceptual,
            supervise_context: true,
            ..BAConfig::default()
        };
        let sup: Vec<(usize, Image)> = (0..2).map(|v| (v, render_view(&p, v, cfg.background, &cfg.render).unwrap().0.color)).collect();
        let (loss, _, g) = evaluate_loss(&p, &sup, &cfg, true).unwrap();
        let g = g.unwrap();
        let norm = ParamClass::ALL.iter().flat_map(|&c| g.values(&p, c)).map(|x| x * x).sum::<f64>().sqrt();
        assert_eq!(loss, 0.0);
        assert!(norm < 1e-9, "{norm}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn reported_pose_errors_ignore_the_world_frame(
        ax in -1.0f64..1.0, ay in -1.0f64..1.0, angle in -3.0f64..3.0,
        tx in -5.0f64..5.0, ty in -5.0f64..5.0, tz in -5.0f64..5.0,
    ) {
        let s = small_scene();
        let mut init = two_view(&s, 2);
        let p = s.poses[2];
        init.set_pose(1, &CameraPose::new(p.rotation * axis_angle(&Vec3::y(), 0.05), p.translation + Vec3::new(0.03, 0.0, 0.0)).unwrap()).unwrap();
        let cfg = BAConfig {
            max_steps: 4,
            ..BAConfig::default()
        }
        .optimize_only(&[ParamClass::TargetPose]);
        let sup = vec![(1, s.images[2].clone())];
        let gt = vec![s.poses[0], s.poses[2]];
        let rigid = CameraPose::new(axis_angle(&Vec3::new(ax, ay, 1.0).normalize(), angle), Vec3::new(tx, ty, tz)).unwrap();
        let moved: Vec<CameraPose> = gt.iter().map(|q| rigid.compose(q)).collect();
        let a = optimize(init.clone(), &sup, &cfg, &GroundTruth { poses: Some(gt) }).unwrap();
        let b = optimize(init, &sup, &cfg, &GroundTruth { poses: Some(moved) }).unwrap();
        for (x, y) in a.history.iter().zip(&b.history) {
            prop_assert!((x.rot_err_deg.unwrap() - y.rot_err_deg.unwrap()).abs() < 1e-6);
            prop_assert!((x.trans_err_deg.unwrap() - y.trans_err_deg.unwrap()).abs() < 1e-6);
        }
    }
}
