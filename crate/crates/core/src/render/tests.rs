use nalgebra::{Matrix3, Vector2, Vector3};

use super::*;
use crate::gradcheck::{run_suite, GradScene};
use crate::scene::{Gaussian, GaussianCloud};

fn axis_camera(f: f64, size: usize) -> Camera {
    let c = (size as f64 - 1.0) / 2.0;
    Camera::new(f, f, c, c, Matrix3::identity(), Vector3::zeros(), size, size).unwrap()
}

fn tiny(mu: Vector3<f64>, alpha: f64, color: Vector3<f64>) -> Gaussian {
    Gaussian::isotropic(mu, 1e-3, alpha, color)
}

#[test]
fn on_axis_projection_matches_hand_evaluation() {
    let cam = Camera::new(100.0, 100.0, 50.0, 40.0, Matrix3::identity(), Vector3::zeros(), 101, 81)
        .unwrap();
    let cloud = GaussianCloud::new(vec![Gaussian::isotropic(
        Vector3::new(0.0, 0.0, 1.0),
        0.01,
        0.5,
        Vector3::zeros(),
    )]);
    let splats = project_splats(&cloud, &cam);
    assert_eq!(splats.len(), 1);
    let s = &splats[0];
    assert!((s.center2d - Vector2::new(50.0, 40.0)).norm() < 1e-12);
    // J = diag(100, 100), Sigma = 1e-4 I  -> 1 px^2, plus the 0.3 dilation
    assert!((s.cov2d - Matrix2::identity() * 1.3).abs().max() < 1e-12);
    assert!((s.conic * s.cov2d - Matrix2::identity()).abs().max() < 1e-12);
}

#[test]
fn splats_sorted_by_depth_and_culled_behind() {
    let cam = axis_camera(10.0, 8);
    let cloud = GaussianCloud::new(vec![
        tiny(Vector3::new(0.0, 0.0, 2.0), 0.5, Vector3::zeros()),
        tiny(Vector3::new(0.0, 0.0, -1.0), 0.5, Vector3::zeros()),
        tiny(Vector3::new(0.0, 0.0, 1.0), 0.5, Vector3::zeros()),
        tiny(Vector3::new(0.0, 0.0, 0.005), 0.5, Vector3::zeros()),
    ]);
    let s = project_splats(&cloud, &cam);
    let order: Vec<usize> = s.iter().map(|s| s.gauss_index).collect();
    assert_eq!(order, vec![2, 0]);
}

#[test]
fn equal_depth_ties_break_by_index() {
    let cam = axis_camera(10.0, 8);
    let cloud = GaussianCloud::new(vec![
        tiny(Vector3::new(0.1, 0.0, 1.0), 0.5, Vector3::zeros()),
        tiny(Vector3::new(-0.1, 0.0, 1.0), 0.5, Vector3::zeros()),
    ]);
    let order: Vec<usize> = project_splats(&cloud, &cam).iter().map(|s| s.gauss_index).collect();
    assert_eq!(order, vec![0, 1]);
}

#[test]
fn opacity_closed_forms() {
    let splat = Splat2D {
        center2d: Vector2::new(3.0, 4.0),
        cov2d: Matrix2::identity(),
        conic: Matrix2::identity(),
        z: 1.0,
        gauss_index: 0,
    };
    assert_eq!(opacity_at(&splat, 0.8, &Vector2::new(3.0, 4.0)), 0.8);
    assert_eq!(opacity_at(&splat, 0.0, &Vector2::new(3.5, 4.0)), 0.0);
    let d = (2.0 * 2f64.ln()).sqrt();
    assert!((opacity_at(&splat, 1.0, &Vector2::new(3.0 + d, 4.0)) - 0.5).abs() < 1e-12);
    assert_eq!(opacity_at(&splat, 1.0, &Vector2::new(3.0, 4.0)), MAX_SPLAT_OPACITY);
}

#[test]
fn single_opaque_splat() {
    let cam = axis_camera(10.0, 5);
    let cloud = GaussianCloud::new(vec![tiny(Vector3::new(0.0, 0.0, 2.0), 1.0, Vector3::new(1.0, 0.0, 0.0))]);
    let out = render(&cloud, &cam, RenderPath::Geometric);
    let c = out.color.get(2, 2);
    assert!((c - Vector3::new(0.99, 0.0, 0.0)).norm() < 1e-12);
    assert!((out.depth.get(2, 2) - 1.98).abs() < 1e-12);
    assert!((out.accum_alpha.get(2, 2) - 0.99).abs() < 1e-12);
    // far corner untouched
    assert_eq!(*out.accum_alpha.get(0, 0), 0.0);
}

#[test]
fn two_stacked_half_splats() {
    let cam = axis_camera(10.0, 5);
    let cloud = GaussianCloud::new(vec![
        tiny(Vector3::new(0.0, 0.0, 2.0), 0.5, Vector3::new(1.0, 0.0, 0.0)),
        tiny(Vector3::new(0.0, 0.0, 3.0), 0.5, Vector3::new(0.0, 1.0, 0.0)),
    ]);
    let out = render(&cloud, &cam, RenderPath::Geometric);
    assert!((out.color.get(2, 2) - Vector3::new(0.5, 0.25, 0.0)).norm() < 1e-12);
    assert!((out.accum_alpha.get(2, 2) - 0.75).abs() < 1e-12);
    assert!((out.depth.get(2, 2) - (0.5 * 2.0 + 0.25 * 3.0)).abs() < 1e-12);
}

#[test]
fn unit_aux_opacity_paths_bit_identical() {
    let mut scene = GradScene::random(42, 12, 16);
    for g in &mut scene.cloud.gaussians {
        g.alpha_aux = 1.0;
    }
    let a = render(&scene.cloud, &scene.camera, RenderPath::Geometric);
    let b = render(&scene.cloud, &scene.camera, RenderPath::Appearance);
    assert_eq!(a.color, b.color);
    assert_eq!(a.depth, b.depth);
    assert_eq!(a.accum_alpha, b.accum_alpha);
}

#[test]
fn conservation_of_weight() {
    for seed in 0..5 {
        let scene = GradScene::random(seed, 10, 12);
        for (settings, tol) in [(RenderSettings::exact(), 1e-9), (RenderSettings::default(), 1e-9)] {
            let out = render_with(&scene.cloud, &scene.camera, RenderPath::Appearance, &settings, None);
            for (a, t) in out.accum_alpha.as_slice().iter().zip(out.transmittance.as_slice()) {
                assert!((a + t - 1.0).abs() <= tol);
                assert!((0.0..=1.0).contains(a));
            }
        }
    }
}

#[test]
fn monotone_in_alpha() {
    let scene = GradScene::random(9, 6, 10);
    let base = render_with(&scene.cloud, &scene.camera, RenderPath::Geometric, &RenderSettings::exact(), None);
    for k in 0..scene.cloud.len() {
        let mut cloud = scene.cloud.clone();
        cloud.gaussians[k].alpha = (cloud.gaussians[k].alpha + 0.15).min(1.0);
        let out = render_with(&cloud, &scene.camera, RenderPath::Geometric, &RenderSettings::exact(), None);
        for (a, b) in out.accum_alpha.as_slice().iter().zip(base.accum_alpha.as_slice()) {
            assert!(*a >= *b - 1e-15);
        }
    }
}

#[test]
fn color_gradient_of_single_splat_is_its_weight() {
    let cam = axis_camera(10.0, 5);
    let cloud = GaussianCloud::new(vec![Gaussian::isotropic(Vector3::new(0.0, 0.0, 2.0), 0.05, 0.7, Vector3::repeat(0.3))]);
    let out = render(&cloud, &cam, RenderPath::Geometric);
    let mut gc = Grid::new(5, 5);
    gc.set(2, 2, Vector3::new(1.0, 0.0, 0.0));
    let gd = Grid::new(5, 5);
    let g = render_backward(&cloud, &cam, RenderPath::Geometric, &gc, &gd).unwrap();
    let w = *out.accum_alpha.get(2, 2);
    assert!((g.grads[0].color - Vector3::new(w, 0.0, 0.0)).norm() < 1e-15);
}

#[test]
fn zero_upstream_gives_zero_gradient() {
    let scene = GradScene::random(1, 5, 8);
    let g = render_backward(
        &scene.cloud,
        &scene.camera,
        RenderPath::Appearance,
        &Grid::new(8, 8),
        &Grid::new(8, 8),
    )
    .unwrap();
    assert!(g.grads.iter().all(|g| *g == GaussianGrad::default()));
}

#[test]
fn geometric_path_never_touches_alpha_aux() {
    let scene = GradScene::random(2, 5, 8);
    for settings in [RenderSettings::default(), RenderSettings::exact()] {
        let g = render_backward_with(
            &scene.cloud,
            &scene.camera,
            RenderPath::Geometric,
            &settings,
            scene.backdrop.as_ref(),
            &scene.grad_color,
            &scene.grad_depth,
        )
        .unwrap();
        assert!(g.grads.iter().all(|g| g.alpha_aux == 0.0));
    }
}

#[test]
fn backward_rejects_misshaped_gradients() {
    let scene = GradScene::random(2, 2, 8);
    let r = render_backward(&scene.cloud, &scene.camera, RenderPath::Geometric, &Grid::new(7, 8), &Grid::new(8, 8));
    assert!(r.is_err());
}

#[test]
fn finite_differences_agree_on_a_few_seeds() {
    let report = run_suite(100, 3, 5, 8);
    assert!(report.passed(), "{:?}", &report.failures[..report.failures.len().min(5)]);
}

#[test]
fn default_settings_match_exact_away_from_thresholds() {
    // a single bright splat: the skip threshold only drops negligible tails
    let cam = axis_camera(8.0, 8);
    let cloud = GaussianCloud::new(vec![Gaussian::isotropic(Vector3::new(0.0, 0.0, 3.0), 0.3, 0.6, Vector3::repeat(0.5))]);
    let a = render_with(&cloud, &cam, RenderPath::Geometric, &RenderSettings::default(), None);
    let b = render_with(&cloud, &cam, RenderPath::Geometric, &RenderSettings::exact(), None);
    for (x, y) in a.accum_alpha.as_slice().iter().zip(b.accum_alpha.as_slice()) {
        assert!((x - y).abs() <= MIN_SPLAT_OPACITY);
    }
}
