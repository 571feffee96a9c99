//! Floater scenarios: a small Gaussian cluster in front of an exactly known
//! backdrop plane, probes of the opacity gradient under color-only losses,
//! and the two-view experiment in which depth consistency removes a floater
//! that color supervision alone leaves in place.
//!
//! Only the cluster carries parameters. The backdrop (the plane's color and
//! depth) is composited behind it with the final transmittance.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::buffer::{DepthMap, Grid, ImageBuffer};
use crate::camera::{vec3_array, Camera};
use crate::error::{Error, Result};
use crate::geometry::{consis_loss, plane_depth};
use crate::optim::{logit, sigmoid, Adam, AdamConfig};
use crate::render::{render_backward_with, render_with, Backdrop, CloudGrad, RenderOutput, RenderPath, RenderSettings};
use crate::scene::{Gaussian, GaussianCloud};

/// Infinite plane `normal . X = offset` with a uniform color.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackgroundPlane {
    #[serde(with = "vec3_array")]
    pub normal: Vector3<f64>,
    pub offset: f64,
    #[serde(with = "vec3_array")]
    pub color: Vector3<f64>,
}

impl BackgroundPlane {
    pub fn backdrop(&self, cam: &Camera) -> Backdrop {
        let depth = plane_depth(cam, &self.normal, self.offset);
        let color = depth.map(|d| if *d > 0.0 { self.color } else { Vector3::zeros() });
        Backdrop { color, depth }
    }
}

/// A floater cluster seen by one camera along `M` pixel rays.
#[derive(Debug, Clone, PartialEq)]
pub struct FloaterScenario {
    pub camera: Camera,
    /// Pixel `(x, y)` of every ray.
    pub rays: Vec<(usize, usize)>,
    pub gt_colors: Vec<Vector3<f64>>,
    pub floater: GaussianCloud,
    pub background: BackgroundPlane,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColorLossKind {
    L1,
    Mse,
}

impl std::str::FromStr for ColorLossKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(ColorLossKind::L1),
            "mse" | "l2" => Ok(ColorLossKind::Mse),
            other => Err(format!("unknown loss `{other}`")),
        }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl FloaterScenario {
    pub fn validate(&self) -> Result<()> {
        self.camera.validate()?;
        if self.rays.is_empty() {
            return Err(Error::InvalidParameter("a floater scenario needs at least one ray".into()));
        }
        if self.rays.len() != self.gt_colors.len() {
            return Err(Error::InvalidParameter(format!(
                "{} rays but {} ground-truth colors",
                self.rays.len(),
                self.gt_colors.len()
            )));
        }
        if let Some(r) = self.rays.iter().find(|(x, y)| *x >= self.camera.width || *y >= self.camera.height) {
            return Err(Error::InvalidParameter(format!("ray pixel {r:?} lies outside the image")));
        }
        self.floater.validate()
    }

    /// Every pixel of the camera as a ray, with the given target image.
    pub fn full_image(camera: Camera, gt: &ImageBuffer, floater: GaussianCloud, background: BackgroundPlane) -> Result<Self> {
        gt.ensure_dims(camera.width, camera.height)?;
        let mut rays = Vec::with_capacity(gt.len());
        let mut gt_colors = Vec::with_capacity(gt.len());
        for y in 0..camera.height {
            for x in 0..camera.width {
                rays.push((x, y));
                gt_colors.push(*gt.get(x, y));
            }
        }
        let s = FloaterScenario {
            camera,
            rays,
            gt_colors,
            floater,
            background,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn with_floater(&self, floater: GaussianCloud) -> Self {
        FloaterScenario { floater, ..self.clone() }
    }

    pub fn backdrop(&self) -> Backdrop {
        self.background.backdrop(&self.camera)
    }

    /// Cluster composited over the backdrop.
    pub fn render(&self, cloud: &GaussianCloud) -> RenderOutput {
        render_with(cloud, &self.camera, RenderPath::Geometric, &RenderSettings::default(), Some(&self.backdrop()))
    }

    /// Color seen along every ray with the cluster in front of the backdrop.
    pub fn ray_colors(&self) -> Vec<Vector3<f64>> {
        let out = self.render(&self.floater);
        self.rays.iter().map(|&(x, y)| *out.color.get(x, y)).collect()
    }
}

/// Per-ray color contributed by the cluster alone, `sum_k c_k w_k`.
pub fn accumulated_floater_color(s: &FloaterScenario) -> Result<Vec<Vector3<f64>>> {
    s.validate()?;
    let out = render_with(&s.floater, &s.camera, RenderPath::Geometric, &RenderSettings::default(), None);
    Ok(s.rays.iter().map(|&(x, y)| *out.color.get(x, y)).collect())
}

/// Per-channel `sum_m sign(c_m - c_m^gt)` where `c_m` is the ray color. The
/// backdrop is fixed, so each sign is the sign of the cluster's color error
/// on that ray.
pub fn equilibrium_statistic(s: &FloaterScenario) -> Result<Vector3<f64>> {
    s.validate()?;
    Ok(s.ray_colors()
        .iter()
        .zip(&s.gt_colors)
        .fold(Vector3::zeros(), |acc, (c, g)| acc + (c - g).map(sign)))
}

/// Mean per-ray, per-channel color loss of `cloud` and its gradient with
/// respect to the rendered image.
pub fn ray_loss(s: &FloaterScenario, cloud: &GaussianCloud, loss: ColorLossKind) -> (f64, ImageBuffer, RenderOutput) {
    let out = s.render(cloud);
    let norm = 1.0 / (3 * s.rays.len()) as f64;
    let mut grad = ImageBuffer::new(s.camera.width, s.camera.height);
    let mut value = 0.0;
    for (&(x, y), g) in s.rays.iter().zip(&s.gt_colors) {
        let r = out.color.get(x, y) - g;
        let (v, d) = match loss {
            ColorLossKind::L1 => (r.abs().sum(), r.map(sign)),
            ColorLossKind::Mse => (r.norm_squared(), r * 2.0),
        };
        value += v * norm;
        *grad.get_mut(x, y) += d * norm;
    }
    (value, grad, out)
}

fn ray_loss_grad(s: &FloaterScenario, cloud: &GaussianCloud, loss: ColorLossKind) -> Result<(f64, CloudGrad)> {
    let (value, grad_color, _) = ray_loss(s, cloud, loss);
    let zero = DepthMap::new(s.camera.width, s.camera.height);
    let backdrop = s.backdrop();
    let g = render_backward_with(
        cloud,
        &s.camera,
        RenderPath::Geometric,
        &RenderSettings::default(),
        Some(&backdrop),
        &grad_color,
        &zero,
    )?;
    Ok((value, g))
}

/// `|dL/dalpha_k|` for every Gaussian of the cluster.
pub fn opacity_gradient_probe(s: &FloaterScenario, loss: ColorLossKind) -> Result<Vec<f64>> {
    s.validate()?;
    let (_, g) = ray_loss_grad(s, &s.floater, loss)?;
    Ok(g.grads.iter().map(|g| g.alpha.abs()).collect())
}

/// Per-pixel contribution to `sum_k dL/dalpha_k`. Summed over the image it
/// gives the total opacity gradient, so an equilibrium shows up as a map of
/// cancelling positive and negative regions.
pub fn alpha_gradient_map(s: &FloaterScenario, loss: ColorLossKind) -> Result<Grid<f64>> {
    s.validate()?;
    let (_, grad_color, _) = ray_loss(s, &s.floater, loss);
    let backdrop = s.backdrop();
    let (w, h) = (s.camera.width, s.camera.height);
    let zero = DepthMap::new(w, h);
    let mut out = Grid::new(w, h);
    for &(x, y) in &s.rays {
        let mut single = ImageBuffer::new(w, h);
        single.set(x, y, *grad_color.get(x, y));
        let g = render_backward_with(
            &s.floater,
            &s.camera,
            RenderPath::Geometric,
            &RenderSettings::default(),
            Some(&backdrop),
            &single,
            &zero,
        )?;
        out.set(x, y, g.grads.iter().map(|g| g.alpha).sum::<f64>());
    }
    Ok(out)
}

/// Geometry of the two-view deadlock fixture.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixtureConfig {
    pub size: usize,
    pub focal: f64,
    /// Offset of the second camera along +x.
    pub baseline: f64,
    pub plane_depth: f64,
    pub floater_depth: f64,
    pub floater_alpha: f64,
    pub floater_color: f64,
    pub background_color: f64,
    /// Half-amplitude of the target pattern over the floater footprint.
    pub delta: f64,
    /// Omit the cluster (control run).
    pub empty: bool,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        FixtureConfig {
            size: 32,
            focal: 32.0,
            baseline: 1.5,
            plane_depth: 4.0,
            floater_depth: 1.0,
            floater_alpha: 0.8,
            floater_color: 0.6,
            background_color: 0.4,
            delta: 0.25,
            empty: false,
        }
    }
}

/// Two views of a fronto-parallel plane. View 0 sees a three-Gaussian cluster
/// on its optical axis; view 1 is translated so the cluster falls outside its
/// image. View 0's targets equal the initial render plus `+delta` on the
/// upper half of the footprint and `-delta` on the lower half. The pattern
/// is point-antisymmetric about the cluster's image center, so every L1
/// opacity and color gradient cancels exactly while the opacity stays in
/// range. View 1's targets are the bare plane.
pub fn deadlock_fixture(cfg: &FixtureConfig) -> Result<[FloaterScenario; 2]> {
    if !(cfg.size >= 2 && cfg.floater_depth > 0.0 && cfg.plane_depth > cfg.floater_depth) {
        return Err(Error::InvalidParameter("floater must sit between the camera and the plane".into()));
    }
    let c = (cfg.size as f64 - 1.0) / 2.0;
    let cam0 = Camera::new(cfg.focal, cfg.focal, c, c, Matrix3::identity(), Vector3::zeros(), cfg.size, cfg.size)?;
    let cam1 = Camera::new(
        cfg.focal,
        cfg.focal,
        c,
        c,
        Matrix3::identity(),
        Vector3::new(-cfg.baseline, 0.0, 0.0),
        cfg.size,
        cfg.size,
    )?;
    let background = BackgroundPlane {
        normal: Vector3::z(),
        offset: cfg.plane_depth,
        color: Vector3::repeat(cfg.background_color),
    };
    let floater = if cfg.empty {
        GaussianCloud::default()
    } else {
        GaussianCloud::new(
            [(0.9, 0.08), (1.0, 0.1), (1.1, 0.12)]
                .iter()
                .map(|&(z, r)| {
                    Gaussian::isotropic(
                        Vector3::new(0.0, 0.0, cfg.floater_depth * z),
                        r * cfg.floater_depth,
                        cfg.floater_alpha,
                        Vector3::repeat(cfg.floater_color),
                    )
                })
                .collect(),
        )
    };
    let settings = RenderSettings::default();
    let out0 = render_with(&floater, &cam0, RenderPath::Geometric, &settings, Some(&background.backdrop(&cam0)));
    let half = cfg.size as f64 / 2.0;
    let gt0 = ImageBuffer::from_fn(cfg.size, cfg.size, |x, y| {
        let v = *out0.color.get(x, y);
        if *out0.accum_alpha.get(x, y) > 0.0 {
            let s = if (y as f64) < half { 1.0 } else { -1.0 };
            v + Vector3::repeat(s * cfg.delta)
        } else {
            v
        }
    });
    let gt1 = background.backdrop(&cam1).color;
    Ok([
        FloaterScenario::full_image(cam0, &gt0, floater.clone(), background)?,
        FloaterScenario::full_image(cam1, &gt1, floater, background)?,
    ])
}

/// Same geometry, targets `render - delta` over the footprint: every ray's
/// error has the same sign.
pub fn non_equilibrium_reference(s: &FloaterScenario, delta: f64) -> FloaterScenario {
    let out = s.render(&s.floater);
    let gt_colors = s
        .rays
        .iter()
        .map(|&(x, y)| {
            let v = *out.color.get(x, y);
            if *out.accum_alpha.get(x, y) > 0.0 {
                v - Vector3::repeat(delta)
            } else {
                v
            }
        })
        .collect();
    FloaterScenario { gt_colors, ..s.clone() }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeadlockConfig {
    pub steps: usize,
    pub lambda_consis: f64,
    pub lr_alpha: f64,
    pub lr_color: f64,
    pub loss: ColorLossKind,
}

impl Default for DeadlockConfig {
    fn default() -> Self {
        DeadlockConfig {
            steps: 2000,
            lambda_consis: 0.05,
            lr_alpha: 0.05,
            lr_color: 0.0025,
            loss: ColorLossKind::L1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub lambda_consis: f64,
    /// Mean cluster opacity before every step and after the last one.
    pub mean_alpha: Vec<f64>,
    pub color_loss: Vec<f64>,
    pub consis_loss: Vec<f64>,
    #[serde(skip)]
    pub final_cloud: GaussianCloud,
}

impl RunTrace {
    pub fn final_mean_alpha(&self) -> f64 {
        *self.mean_alpha.last().unwrap_or(&0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeadlockReport {
    pub color_only: RunTrace,
    pub with_consis: RunTrace,
    /// Norm of the view-0 opacity gradient after the color-only run.
    pub equilibrium_alpha_grad: f64,
    /// Same norm with the non-equilibrium targets on identical geometry.
    pub reference_alpha_grad: f64,
}

impl DeadlockReport {
    pub fn gradient_ratio(&self) -> f64 {
        if self.reference_alpha_grad > 0.0 {
            self.equilibrium_alpha_grad / self.reference_alpha_grad
        } else {
            0.0
        }
    }

    /// `step,mean_alpha_color_only,mean_alpha_consis,color_loss_color_only,color_loss_consis,consis_loss`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,mean_alpha_color_only,mean_alpha_consis,color_loss_color_only,color_loss_consis,consis_loss\n");
        let a = &self.color_only;
        let b = &self.with_consis;
        for k in 0..a.mean_alpha.len().max(b.mean_alpha.len()) {
            let get = |v: &Vec<f64>| v.get(k).map(|x| format!("{x:.9e}")).unwrap_or_default();
            out.push_str(&format!(
                "{k},{},{},{},{},{}\n",
                get(&a.mean_alpha),
                get(&b.mean_alpha),
                get(&a.color_loss),
                get(&b.color_loss),
                get(&b.consis_loss)
            ));
        }
        out
    }
}

pub fn mean_alpha(cloud: &GaussianCloud) -> f64 {
    if cloud.is_empty() {
        0.0
    } else {
        cloud.iter().map(|g| g.alpha).sum::<f64>() / cloud.len() as f64
    }
}

/// Optimizes the cluster's opacities (logit) and colors against both views
/// with the color loss plus `lambda_consis` times the depth consistency of
/// the two geometric depth maps.
pub fn run_fixture(views: &[FloaterScenario; 2], lambda_consis: f64, cfg: &DeadlockConfig) -> Result<RunTrace> {
    let mut cloud = views[0].floater.clone();
    let n = cloud.len();
    let mut theta: Vec<f64> = cloud.iter().map(|g| logit(g.alpha)).collect();
    let mut colors: Vec<f64> = cloud.iter().flat_map(|g| g.color.iter().copied().collect::<Vec<_>>()).collect();
    let adam_cfg = AdamConfig { eps: 1e-8, ..AdamConfig::default() };
    let mut adam_a = Adam::new(n, adam_cfg);
    let mut adam_c = Adam::new(3 * n, adam_cfg);
    let mut trace = RunTrace {
        lambda_consis,
        mean_alpha: vec![mean_alpha(&cloud)],
        color_loss: Vec::new(),
        consis_loss: Vec::new(),
        final_cloud: GaussianCloud::default(),
    };
    let backdrops = [views[0].backdrop(), views[1].backdrop()];
    for _ in 0..cfg.steps {
        if n == 0 {
            trace.mean_alpha.push(0.0);
            continue;
        }
        let mut grad_color = Vec::new();
        let mut outs = Vec::new();
        let mut color_total = 0.0;
        for v in views {
            let (value, g, out) = ray_loss(v, &cloud, cfg.loss);
            color_total += value;
            grad_color.push(g);
            outs.push(out);
        }
        let mut grad_depth = [
            DepthMap::new(views[0].camera.width, views[0].camera.height),
            DepthMap::new(views[1].camera.width, views[1].camera.height),
        ];
        let mut consis_value = 0.0;
        if lambda_consis > 0.0 {
            let c = consis_loss(&outs[0].depth, &outs[1].depth, &views[0].camera, &views[1].camera)?;
            consis_value = c.value;
            grad_depth[0] = c.grad_i.map(|g| g * lambda_consis);
            grad_depth[1] = c.grad_j.map(|g| g * lambda_consis);
        }
        trace.color_loss.push(color_total);
        trace.consis_loss.push(consis_value);
        let mut total = CloudGrad::zeros(n);
        for (k, v) in views.iter().enumerate() {
            let g = render_backward_with(
                &cloud,
                &v.camera,
                RenderPath::Geometric,
                &RenderSettings::default(),
                Some(&backdrops[k]),
                &grad_color[k],
                &grad_depth[k],
            )?;
            total.add_scaled(&g, 1.0);
        }
        let ga: Vec<f64> = total.grads.iter().zip(&cloud.gaussians).map(|(g, p)| g.alpha * p.alpha * (1.0 - p.alpha)).collect();
        let gc: Vec<f64> = total.grads.iter().flat_map(|g| g.color.iter().copied().collect::<Vec<_>>()).collect();
        adam_a.step(&mut theta, &ga, cfg.lr_alpha);
        adam_c.step(&mut colors, &gc, cfg.lr_color);
        for (k, g) in cloud.gaussians.iter_mut().enumerate() {
            g.alpha = sigmoid(theta[k]);
            for ch in 0..3 {
                colors[3 * k + ch] = colors[3 * k + ch].clamp(0.0, 1.0);
                g.color[ch] = colors[3 * k + ch];
            }
        }
        trace.mean_alpha.push(mean_alpha(&cloud));
    }
    trace.final_cloud = cloud;
    Ok(trace)
}

fn grad_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Color-only run and color-plus-consistency run from the same start, with
/// the opacity-gradient collapse measured at the end of the color-only run.
pub fn deadlock_break_experiment(views: &[FloaterScenario; 2], delta: f64, cfg: &DeadlockConfig) -> Result<DeadlockReport> {
    views[0].validate()?;
    views[1].validate()?;
    let color_only = run_fixture(views, 0.0, cfg)?;
    let with_consis = run_fixture(views, cfg.lambda_consis, cfg)?;
    let at_end = views[0].with_floater(color_only.final_cloud.clone());
    let equilibrium_alpha_grad = grad_norm(&opacity_gradient_probe(&at_end, cfg.loss)?);
    let reference = non_equilibrium_reference(&at_end, delta);
    let reference_alpha_grad = grad_norm(&opacity_gradient_probe(&reference, cfg.loss)?);
    Ok(DeadlockReport {
        color_only,
        with_consis,
        equilibrium_alpha_grad,
        reference_alpha_grad,
    })
}
