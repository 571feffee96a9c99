//! Differentiable rasterization of Gaussians into color, depth and
//! accumulated-alpha maps along the geometric or the appearance path.
//!
//! Every pixel blends all splats whose opacity footprint covers it, front to
//! back in center-depth order:
//!
//! ```text
//! w_k = sigma_k * tau_k,   tau_{k+1} = tau_k * (1 - sigma_k)
//! color = sum c_k w_k,     depth = sum z_k w_k,     accum = sum w_k
//! ```
//!
//! The geometric path uses `sigma_k = alpha_k G_k(p)`; the appearance path
//! uses `alpha_aux_k alpha_k G_k(p)`. An optional [`Backdrop`] is composited
//! behind the splats with the final transmittance.

mod backward;
mod forward;

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::buffer::{DepthMap, Grid, ImageBuffer};
use crate::camera::Camera;
use crate::scene::{rotation_from_quat, Gaussian, GaussianCloud};

pub use backward::{render_backward, render_backward_with, CloudGrad, GaussianGrad};
pub use forward::{render, render_with};

/// Gaussians with camera depth at or below this are culled.
pub const NEAR_PLANE: f64 = 0.01;
/// Isotropic screen-space dilation added to every projected covariance (px^2).
pub const COV2D_DILATION: f64 = 0.3;
/// Per-splat opacity is clamped to this value.
pub const MAX_SPLAT_OPACITY: f64 = 0.99;
/// Contributions below this opacity are skipped.
pub const MIN_SPLAT_OPACITY: f64 = 1.0 / 255.0;
/// Blending stops once transmittance falls below this.
pub const EARLY_STOP_TRANSMITTANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RenderPath {
    /// Uses the geometric opacity `alpha` only.
    Geometric,
    /// Uses `alpha_aux * alpha`.
    Appearance,
}

impl RenderPath {
    #[inline]
    pub fn effective_alpha(self, g: &Gaussian) -> f64 {
        match self {
            RenderPath::Geometric => g.alpha,
            RenderPath::Appearance => g.alpha_aux * g.alpha,
        }
    }
}

impl std::str::FromStr for RenderPath {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "geometric" | "geo" => Ok(RenderPath::Geometric),
            "appearance" | "app" => Ok(RenderPath::Appearance),
            other => Err(format!("unknown render path `{other}`")),
        }
    }
}

/// Thresholds applied during blending.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderSettings {
    /// Contributions with opacity below this are skipped. Zero disables both
    /// the skip and the footprint cull.
    pub min_opacity: f64,
    /// Transmittance early-termination threshold; `None` blends every splat.
    pub early_stop: Option<f64>,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            min_opacity: MIN_SPLAT_OPACITY,
            early_stop: Some(EARLY_STOP_TRANSMITTANCE),
        }
    }
}

impl RenderSettings {
    /// Smooth variant used for gradient checks: no skip threshold, no
    /// footprint cull, no early termination.
    pub fn exact() -> Self {
        Self {
            min_opacity: 0.0,
            early_stop: None,
        }
    }
}

/// Color and depth seen behind all splats, weighted by final transmittance.
#[derive(Debug, Clone, PartialEq)]
pub struct Backdrop {
    pub color: ImageBuffer,
    pub depth: DepthMap,
}

impl Backdrop {
    /// A constant background color with zero depth.
    pub fn constant(width: usize, height: usize, color: Vector3<f64>) -> Self {
        Self {
            color: Grid::filled(width, height, color),
            depth: Grid::filled(width, height, 0.0),
        }
    }
}

/// A Gaussian projected to screen space.
#[derive(Debug, Clone, PartialEq)]
pub struct Splat2D {
    pub center2d: Vector2<f64>,
    /// Dilated screen covariance, px^2.
    pub cov2d: Matrix2<f64>,
    /// Inverse of `cov2d`.
    pub conic: Matrix2<f64>,
    /// Camera-space depth of the center.
    pub z: f64,
    pub gauss_index: usize,
}

/// Cached intermediates of the projection needed by the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct Projection {
    pub splat: Splat2D,
    pub x_cam: Vector3<f64>,
    pub jacobian: Matrix2x3<f64>,
    pub cov_cam: Matrix3<f64>,
}

pub(crate) fn perspective_jacobian(cam: &Camera, xc: &Vector3<f64>) -> Matrix2x3<f64> {
    let (x, y, z) = (xc.x, xc.y, xc.z);
    Matrix2x3::new(
        cam.fx / z,
        0.0,
        -cam.fx * x / (z * z),
        0.0,
        cam.fy / z,
        -cam.fy * y / (z * z),
    )
}

pub(crate) fn project_one(cam: &Camera, g: &Gaussian, index: usize) -> Option<Projection> {
    let x_cam = cam.to_camera(&g.mu);
    if !(x_cam.z > NEAR_PLANE) {
        return None;
    }
    let (center2d, z) = cam.project_camera(&x_cam)?;
    let rq = rotation_from_quat(&g.rot);
    let s2 = Matrix3::from_diagonal(&g.scale.component_mul(&g.scale));
    let cov_world = rq * s2 * rq.transpose();
    let w = cam.rotation;
    let cov_cam = w * cov_world * w.transpose();
    let jacobian = perspective_jacobian(cam, &x_cam);
    let cov2d = jacobian * cov_cam * jacobian.transpose() + Matrix2::identity() * COV2D_DILATION;
    let det = cov2d.determinant();
    assert!(det > 0.0, "dilated screen covariance must be positive definite");
    let conic = Matrix2::new(cov2d[(1, 1)], -cov2d[(0, 1)], -cov2d[(1, 0)], cov2d[(0, 0)]) / det;
    Some(Projection {
        splat: Splat2D {
            center2d,
            cov2d,
            conic,
            z,
            gauss_index: index,
        },
        x_cam,
        jacobian,
        cov_cam,
    })
}

pub(crate) fn project_all(cloud: &GaussianCloud, cam: &Camera) -> Vec<Projection> {
    let mut out: Vec<Projection> = cloud
        .iter()
        .enumerate()
        .filter_map(|(i, g)| project_one(cam, g, i))
        .collect();
    out.sort_by(|a, b| {
        a.splat
            .z
            .total_cmp(&b.splat.z)
            .then(a.splat.gauss_index.cmp(&b.splat.gauss_index))
    });
    out
}

/// Projects every Gaussian in front of the near plane and returns the
/// splats sorted by center depth (ties broken by Gaussian index).
pub fn project_splats(cloud: &GaussianCloud, cam: &Camera) -> Vec<Splat2D> {
    project_all(cloud, cam).into_iter().map(|p| p.splat).collect()
}

/// Exponent `-1/2 d^T conic d` for `d = pixel - center`.
#[inline]
pub(crate) fn splat_power(splat: &Splat2D, pixel: &Vector2<f64>) -> (f64, Vector2<f64>) {
    let d = pixel - splat.center2d;
    let a = &splat.conic;
    let q = a[(0, 0)] * d.x * d.x + 2.0 * a[(0, 1)] * d.x * d.y + a[(1, 1)] * d.y * d.y;
    (-0.5 * q, d)
}

/// Opacity of `splat` at `pixel`, clamped to [`MAX_SPLAT_OPACITY`]. The
/// skip threshold is not applied here.
pub fn opacity_at(splat: &Splat2D, alpha_eff: f64, pixel: &Vector2<f64>) -> f64 {
    let (power, _) = splat_power(splat, pixel);
    (alpha_eff * power.exp()).min(MAX_SPLAT_OPACITY)
}

/// Pixel-aligned footprint of a splat: rows `y0..=y1`, columns `x0..=x1`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Footprint {
    pub x0: usize,
    pub x1: usize,
    pub y0: usize,
    pub y1: usize,
}

/// Bounding box of the region where `alpha_eff * G >= min_opacity`, so that
/// culling never removes a contribution the skip test would keep.
pub(crate) fn footprint(
    splat: &Splat2D,
    alpha_eff: f64,
    settings: &RenderSettings,
    width: usize,
    height: usize,
) -> Option<Footprint> {
    if settings.min_opacity <= 0.0 {
        return (alpha_eff > 0.0).then_some(Footprint {
            x0: 0,
            x1: width - 1,
            y0: 0,
            y1: height - 1,
        });
    }
    if alpha_eff < settings.min_opacity {
        return None;
    }
    let q_max = 2.0 * (alpha_eff / settings.min_opacity).ln();
    let rx = (q_max * splat.cov2d[(0, 0)]).sqrt();
    let ry = (q_max * splat.cov2d[(1, 1)]).sqrt();
    let c = splat.center2d;
    let lo_x = (c.x - rx).floor() - 1.0;
    let hi_x = (c.x + rx).ceil() + 1.0;
    let lo_y = (c.y - ry).floor() - 1.0;
    let hi_y = (c.y + ry).ceil() + 1.0;
    if hi_x < 0.0 || hi_y < 0.0 || lo_x > (width - 1) as f64 || lo_y > (height - 1) as f64 {
        return None;
    }
    Some(Footprint {
        x0: lo_x.max(0.0) as usize,
        x1: hi_x.min((width - 1) as f64) as usize,
        y0: lo_y.max(0.0) as usize,
        y1: hi_y.min((height - 1) as f64) as usize,
    })
}

/// Render result of one path.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub color: ImageBuffer,
    /// Expected depth `sum z_k w_k` (not normalized by `accum_alpha`).
    pub depth: DepthMap,
    pub accum_alpha: Grid<f64>,
    /// Transmittance left after the last blended splat.
    pub transmittance: Grid<f64>,
    pub path: RenderPath,
}

impl RenderOutput {
    /// Depth divided by accumulated alpha where the latter exceeds `min_alpha`.
    pub fn normalized_depth(&self, min_alpha: f64) -> DepthMap {
        let mut out = self.depth.clone();
        for (d, a) in out.as_mut_slice().iter_mut().zip(self.accum_alpha.as_slice()) {
            *d = if *a > min_alpha { *d / *a } else { 0.0 };
        }
        out
    }
}

#[cfg(test)]
mod tests;
