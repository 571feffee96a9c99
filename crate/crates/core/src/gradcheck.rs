//! Central finite-difference checks of the render backward pass.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::buffer::{DepthMap, Grid, ImageBuffer};
use crate::camera::Camera;
use crate::render::{render_backward_with, render_with, Backdrop, RenderPath, RenderSettings};
use crate::scene::{normalize_quat, Gaussian, GaussianCloud};

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
/// Denominator floor of the relative error; gradients below this scale are
/// compared on an absolute basis.
pub const FD_REL_FLOOR: f64 = 1e-5;

pub const PARAM_GROUPS: [&str; 6] = ["mu", "alpha", "alpha_aux", "color", "scale", "rot"];

/// Group name of each of the 17 per-Gaussian parameter slots.
pub fn param_group(slot: usize) -> &'static str {
    match slot {
        0..=2 => "mu",
        3 => "alpha",
        4 => "alpha_aux",
        5..=7 => "color",
        8..=10 => "scale",
        _ => "rot",
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_REL_FLOOR)
}

fn param_mut(g: &mut Gaussian, slot: usize) -> &mut f64 {
    match slot {
        0..=2 => &mut g.mu[slot],
        3 => &mut g.alpha,
        4 => &mut g.alpha_aux,
        5..=7 => &mut g.color[slot - 5],
        8..=10 => &mut g.scale[slot - 8],
        _ => &mut g.rot[slot - 11],
    }
}

/// A small random scene for gradient checking: one camera at the origin
/// looking down +z and `n` Gaussians in front of it.
#[derive(Debug, Clone)]
pub struct GradScene {
    pub cloud: GaussianCloud,
    pub camera: Camera,
    pub grad_color: ImageBuffer,
    pub grad_depth: DepthMap,
    pub backdrop: Option<Backdrop>,
}

impl GradScene {
    pub fn random(seed: u64, n: usize, size: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = size as f64;
        let c = (size as f64 - 1.0) / 2.0;
        let camera = Camera::new(f, f, c, c, Matrix3::identity(), Vector3::zeros(), size, size)
            .expect("valid camera");
        let mut gaussians = Vec::with_capacity(n);
        for k in 0..n {
            // distinct depths keep the sort order stable under perturbation
            let z = 2.0 + 2.0 * (k as f64 + 0.2 + 0.6 * rng.random::<f64>()) / n as f64;
            let mut rot = [0.0; 4];
            rot.iter_mut().for_each(|v| *v = rng.random::<f64>() - 0.5);
            normalize_quat(&mut rot);
            gaussians.push(Gaussian {
                mu: Vector3::new(
                    (rng.random::<f64>() - 0.5) * 0.6 * z,
                    (rng.random::<f64>() - 0.5) * 0.6 * z,
                    z,
                ),
                alpha: 0.2 + 0.6 * rng.random::<f64>(),
                alpha_aux: 0.3 + 0.6 * rng.random::<f64>(),
                color: Vector3::new(rng.random(), rng.random(), rng.random()),
                scale: Vector3::new(
                    0.15 + 0.35 * rng.random::<f64>(),
                    0.15 + 0.35 * rng.random::<f64>(),
                    0.15 + 0.35 * rng.random::<f64>(),
                ),
                rot,
            });
        }
        let grad_color = Grid::from_fn(size, size, |_, _| {
            Vector3::new(
                rng.random::<f64>() - 0.5,
                rng.random::<f64>() - 0.5,
                rng.random::<f64>() - 0.5,
            )
        });
        let grad_depth = Grid::from_fn(size, size, |_, _| rng.random::<f64>() - 0.5);
        let backdrop = Backdrop {
            color: Grid::from_fn(size, size, |_, _| {
                Vector3::new(rng.random(), rng.random(), rng.random())
            }),
            depth: Grid::from_fn(size, size, |_, _| 5.0 + rng.random::<f64>()),
        };
        Self {
            cloud: GaussianCloud::new(gaussians),
            camera,
            grad_color,
            grad_depth,
            backdrop: Some(backdrop),
        }
    }

    /// Scalar objective `<grad_color, color> + <grad_depth, depth>`.
    pub fn objective(&self, cloud: &GaussianCloud, path: RenderPath, settings: &RenderSettings) -> f64 {
        let out = render_with(cloud, &self.camera, path, settings, self.backdrop.as_ref());
        let c: f64 = out
            .color
            .as_slice()
            .iter()
            .zip(self.grad_color.as_slice())
            .map(|(a, b)| a.dot(b))
            .sum();
        let d: f64 = out
            .depth
            .as_slice()
            .iter()
            .zip(self.grad_depth.as_slice())
            .map(|(a, b)| a * b)
            .sum();
        c + d
    }
}

#[derive(Debug, Clone)]
pub struct GradMismatch {
    pub gaussian: usize,
    pub slot: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Worst relative error seen per parameter group, in [`PARAM_GROUPS`] order.
    pub worst: [f64; 6],
    pub failures: Vec<GradMismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        for (a, b) in self.worst.iter_mut().zip(other.worst) {
            *a = a.max(b);
        }
        self.failures.extend(other.failures);
    }
}

/// Compares every analytic parameter gradient against central differences.
pub fn check_scene(scene: &GradScene, path: RenderPath, settings: &RenderSettings) -> GradCheckReport {
    let analytic = render_backward_with(
        &scene.cloud,
        &scene.camera,
        path,
        settings,
        scene.backdrop.as_ref(),
        &scene.grad_color,
        &scene.grad_depth,
    )
    .expect("gradient buffers match the camera");
    let mut report = GradCheckReport::default();
    let mut cloud = scene.cloud.clone();
    for gi in 0..cloud.len() {
        let a = analytic.grads[gi].to_array();
        for slot in 0..15 {
            let orig = *param_mut(&mut cloud.gaussians[gi], slot);
            *param_mut(&mut cloud.gaussians[gi], slot) = orig + FD_STEP;
            let fp = scene.objective(&cloud, path, settings);
            *param_mut(&mut cloud.gaussians[gi], slot) = orig - FD_STEP;
            let fm = scene.objective(&cloud, path, settings);
            *param_mut(&mut cloud.gaussians[gi], slot) = orig;
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            let err = relative_error(a[slot], numeric);
            let group = PARAM_GROUPS
                .iter()
                .position(|g| *g == param_group(slot))
                .unwrap_or(0);
            report.worst[group] = report.worst[group].max(err);
            report.checked += 1;
            if err > FD_REL_TOL {
                report.failures.push(GradMismatch {
                    gaussian: gi,
                    slot,
                    analytic: a[slot],
                    numeric,
                    rel_error: err,
                });
            }
        }
    }
    report
}

/// Runs the seeded suite: `seeds` random scenes of `n` Gaussians on a
/// `size`-square image, both render paths, exact blending.
pub fn run_suite(first_seed: u64, seeds: usize, n: usize, size: usize) -> GradCheckReport {
    let settings = RenderSettings::exact();
    let mut report = GradCheckReport::default();
    for s in 0..seeds as u64 {
        let scene = GradScene::random(first_seed + s, n, size);
        for path in [RenderPath::Geometric, RenderPath::Appearance] {
            report.merge(check_scene(&scene, path, &settings));
        }
    }
    report
}
