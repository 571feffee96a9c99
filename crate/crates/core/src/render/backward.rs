use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use super::forward::{blend_pixel, prepare, Contribution, Prepared};
use super::{Backdrop, RenderPath, RenderSettings};
use crate::buffer::{DepthMap, ImageBuffer};
use crate::camera::Camera;
use crate::error::Result;
use crate::scene::{rotation_from_quat, rotation_from_quat_backward, GaussianCloud};

/// Rows per gradient-accumulation block. Blocks are reduced in row order,
/// so results do not depend on the thread count.
const CHUNK_ROWS: usize = 8;

/// Gradient with respect to one Gaussian's parameters.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GaussianGrad {
    pub mu: Vector3<f64>,
    pub alpha: f64,
    pub alpha_aux: f64,
    pub color: Vector3<f64>,
    pub scale: Vector3<f64>,
    pub rot: [f64; 4],
}

impl GaussianGrad {
    pub fn add_scaled(&mut self, other: &GaussianGrad, k: f64) {
        self.mu += other.mu * k;
        self.alpha += other.alpha * k;
        self.alpha_aux += other.alpha_aux * k;
        self.color += other.color * k;
        self.scale += other.scale * k;
        for (a, b) in self.rot.iter_mut().zip(other.rot.iter()) {
            *a += b * k;
        }
    }

    /// All 17 components in a fixed order: mu, alpha, alpha_aux, color, scale, rot.
    pub fn to_array(&self) -> [f64; 17] {
        let mut out = [0.0; 17];
        out[..3].copy_from_slice(self.mu.as_slice());
        out[3] = self.alpha;
        out[4] = self.alpha_aux;
        out[5..8].copy_from_slice(self.color.as_slice());
        out[8..11].copy_from_slice(self.scale.as_slice());
        out[11..15].copy_from_slice(&self.rot);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.to_array()[..15].iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CloudGrad {
    pub grads: Vec<GaussianGrad>,
}

impl CloudGrad {
    pub fn zeros(n: usize) -> Self {
        Self {
            grads: vec![GaussianGrad::default(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn add_scaled(&mut self, other: &CloudGrad, k: f64) {
        assert_eq!(self.grads.len(), other.grads.len());
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_scaled(b, k);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(GaussianGrad::is_finite)
    }
}

/// Screen-space gradient of one projected splat.
#[derive(Debug, Clone, Copy, Default)]
struct SplatGrad {
    center: Vector2<f64>,
    conic: Matrix2<f64>,
    alpha_eff: f64,
    color: Vector3<f64>,
    z: f64,
}

impl SplatGrad {
    fn add(&mut self, o: &SplatGrad) {
        self.center += o.center;
        self.conic += o.conic;
        self.alpha_eff += o.alpha_eff;
        self.color += o.color;
        self.z += o.z;
    }
}

/// Reverse pass of [`super::render`] with default thresholds and no backdrop.
pub fn render_backward(
    cloud: &GaussianCloud,
    cam: &Camera,
    path: RenderPath,
    grad_color: &ImageBuffer,
    grad_depth: &DepthMap,
) -> Result<CloudGrad> {
    render_backward_with(
        cloud,
        cam,
        path,
        &RenderSettings::default(),
        None,
        grad_color,
        grad_depth,
    )
}

/// Gradients of `<grad_color, color> + <grad_depth, depth>` with respect to
/// every Gaussian parameter, replaying the forward blend exactly.
pub fn render_backward_with(
    cloud: &GaussianCloud,
    cam: &Camera,
    path: RenderPath,
    settings: &RenderSettings,
    backdrop: Option<&Backdrop>,
    grad_color: &ImageBuffer,
    grad_depth: &DepthMap,
) -> Result<CloudGrad> {
    grad_color.ensure_dims(cam.width, cam.height)?;
    grad_depth.ensure_dims(cam.width, cam.height)?;
    let prep = prepare(cloud, cam, path, settings);
    let n_proj = prep.projections.len();

    let row_starts: Vec<usize> = (0..cam.height).step_by(CHUNK_ROWS).collect();
    let partials: Vec<Vec<SplatGrad>> = row_starts
        .par_iter()
        .map(|&y0| {
            let mut acc = vec![SplatGrad::default(); n_proj];
            let mut scratch = Vec::new();
            for y in y0..(y0 + CHUNK_ROWS).min(cam.height) {
                for x in 0..cam.width {
                    let gc = *grad_color.get(x, y);
                    let gd = *grad_depth.get(x, y);
                    if gc == Vector3::zeros() && gd == 0.0 {
                        continue;
                    }
                    scratch.clear();
                    let blend = blend_pixel(&prep, x, y, settings, |c| scratch.push(*c));
                    let (bg_c, bg_d) = match backdrop {
                        Some(b) => (b.color.get(x, y) * blend.tau, b.depth.get(x, y) * blend.tau),
                        None => (Vector3::zeros(), 0.0),
                    };
                    backprop_pixel(&prep, &scratch, gc, gd, bg_c, bg_d, &mut acc);
                }
            }
            acc
        })
        .collect();

    let mut splat_grads = vec![SplatGrad::default(); n_proj];
    for part in &partials {
        for (a, b) in splat_grads.iter_mut().zip(part) {
            a.add(b);
        }
    }

    let mut out = CloudGrad::zeros(cloud.len());
    for (k, sg) in splat_grads.iter().enumerate() {
        let proj = &prep.projections[k];
        let gi = proj.splat.gauss_index;
        let g = &cloud.gaussians[gi];
        let grad = &mut out.grads[gi];
        grad.color += sg.color;
        match path {
            RenderPath::Geometric => grad.alpha += sg.alpha_eff,
            RenderPath::Appearance => {
                grad.alpha += sg.alpha_eff * g.alpha_aux;
                grad.alpha_aux += sg.alpha_eff * g.alpha;
            }
        }

        let conic = proj.splat.conic;
        let d_cov2d = -(conic * sg.conic * conic);
        let jac = proj.jacobian;
        let d_cov_cam = jac.transpose() * d_cov2d * jac;
        let d_jac = 2.0 * d_cov2d * jac * proj.cov_cam;

        let w = cam.rotation;
        let d_cov_world = w.transpose() * d_cov_cam * w;
        let rq = rotation_from_quat(&g.rot);
        let s2 = Matrix3::from_diagonal(&g.scale.component_mul(&g.scale));
        let d_rq = 2.0 * d_cov_world * rq * s2;
        let d_diag = rq.transpose() * d_cov_world * rq;
        for i in 0..3 {
            grad.scale[i] += 2.0 * g.scale[i] * d_diag[(i, i)];
        }
        let dq = rotation_from_quat_backward(&g.rot, &d_rq);
        for (a, b) in grad.rot.iter_mut().zip(dq) {
            *a += b;
        }

        let xc = proj.x_cam;
        let (x, y, z) = (xc.x, xc.y, xc.z);
        let (fx, fy) = (cam.fx, cam.fy);
        let z2 = z * z;
        let z3 = z2 * z;
        let mut d_xc = Vector3::new(0.0, 0.0, sg.z);
        d_xc.x += sg.center.x * fx / z;
        d_xc.y += sg.center.y * fy / z;
        d_xc.z -= sg.center.x * fx * x / z2 + sg.center.y * fy * y / z2;
        d_xc.x -= d_jac[(0, 2)] * fx / z2;
        d_xc.y -= d_jac[(1, 2)] * fy / z2;
        d_xc.z += -d_jac[(0, 0)] * fx / z2 - d_jac[(1, 1)] * fy / z2
            + d_jac[(0, 2)] * 2.0 * fx * x / z3
            + d_jac[(1, 2)] * 2.0 * fy * y / z3;
        grad.mu += w.transpose() * d_xc;
    }
    Ok(out)
}

fn backprop_pixel(
    prep: &Prepared,
    contribs: &[Contribution],
    gc: Vector3<f64>,
    gd: f64,
    bg_color: Vector3<f64>,
    bg_depth: f64,
    acc: &mut [SplatGrad],
) {
    // Suffix sums of everything blended behind the current contribution.
    let mut rest_c = bg_color;
    let mut rest_d = bg_depth;
    for c in contribs.iter().rev() {
        let k = c.proj;
        let col = prep.colors[k];
        let z = prep.projections[k].splat.z;
        let weight = c.sigma * c.tau;
        let sg = &mut acc[k];
        sg.color += gc * weight;
        sg.z += gd * weight;

        let inv = 1.0 / (1.0 - c.sigma);
        let d_sigma = gc.dot(&(col * c.tau - rest_c * inv)) + gd * (z * c.tau - rest_d * inv);
        rest_c += col * weight;
        rest_d += z * weight;

        if !c.clamped {
            sg.alpha_eff += d_sigma * c.falloff;
            let d_power = d_sigma * c.sigma;
            let conic = prep.projections[k].splat.conic;
            sg.center += conic * c.offset * d_power;
            sg.conic += c.offset * c.offset.transpose() * (-0.5 * d_power);
        }
    }
}
