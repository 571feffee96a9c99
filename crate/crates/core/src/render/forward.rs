use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;

use super::{
    footprint, project_all, splat_power, Backdrop, Projection, RenderOutput, RenderPath,
    RenderSettings, MAX_SPLAT_OPACITY,
};
use crate::buffer::Grid;
use crate::camera::Camera;
use crate::scene::GaussianCloud;

/// Splats bucketed by the image rows their footprint touches.
pub(crate) struct Prepared {
    pub projections: Vec<Projection>,
    pub alpha_eff: Vec<f64>,
    pub colors: Vec<Vector3<f64>>,
    /// Per row: `(projection index, first column, last column)` in depth order.
    pub rows: Vec<Vec<(u32, u32, u32)>>,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Contribution {
    pub proj: usize,
    pub sigma: f64,
    /// Unscaled Gaussian falloff `exp(power)`.
    pub falloff: f64,
    pub clamped: bool,
    pub offset: Vector2<f64>,
    pub tau: f64,
}

pub(crate) fn prepare(
    cloud: &GaussianCloud,
    cam: &Camera,
    path: RenderPath,
    settings: &RenderSettings,
) -> Prepared {
    let projections = project_all(cloud, cam);
    let alpha_eff: Vec<f64> = projections
        .iter()
        .map(|p| path.effective_alpha(&cloud.gaussians[p.splat.gauss_index]))
        .collect();
    let colors = projections
        .iter()
        .map(|p| cloud.gaussians[p.splat.gauss_index].color)
        .collect();
    let mut rows = vec![Vec::new(); cam.height];
    for (k, p) in projections.iter().enumerate() {
        if let Some(fp) = footprint(&p.splat, alpha_eff[k], settings, cam.width, cam.height) {
            for row in rows.iter_mut().take(fp.y1 + 1).skip(fp.y0) {
                row.push((k as u32, fp.x0 as u32, fp.x1 as u32));
            }
        }
    }
    Prepared {
        projections,
        alpha_eff,
        colors,
        rows,
    }
}

/// Blend of the splats alone at one pixel.
#[derive(Debug, Clone, Copy)]
pub(crate) struct PixelBlend {
    pub color: Vector3<f64>,
    pub depth: f64,
    pub weight_sum: f64,
    pub tau: f64,
}

/// Front-to-back blend of one pixel; calls `visit` for every contribution.
#[inline]
pub(crate) fn blend_pixel(
    prep: &Prepared,
    x: usize,
    y: usize,
    settings: &RenderSettings,
    mut visit: impl FnMut(&Contribution),
) -> PixelBlend {
    let pixel = Vector2::new(x as f64, y as f64);
    let mut color = Vector3::zeros();
    let mut depth = 0.0;
    let mut weight_sum = 0.0;
    let mut tau = 1.0;
    for &(k, x0, x1) in &prep.rows[y] {
        if (x as u32) < x0 || (x as u32) > x1 {
            continue;
        }
        let k = k as usize;
        let splat = &prep.projections[k].splat;
        let (power, offset) = splat_power(splat, &pixel);
        let falloff = power.exp();
        let raw = prep.alpha_eff[k] * falloff;
        if raw < settings.min_opacity || raw <= 0.0 {
            continue;
        }
        let clamped = raw > MAX_SPLAT_OPACITY;
        let sigma = if clamped { MAX_SPLAT_OPACITY } else { raw };
        let weight = sigma * tau;
        color += prep.colors[k] * weight;
        depth += splat.z * weight;
        weight_sum += weight;
        visit(&Contribution {
            proj: k,
            sigma,
            falloff,
            clamped,
            offset,
            tau,
        });
        tau *= 1.0 - sigma;
        if let Some(stop) = settings.early_stop {
            if tau < stop {
                break;
            }
        }
    }
    PixelBlend {
        color,
        depth,
        weight_sum,
        tau,
    }
}

/// Renders the given path with default thresholds and no backdrop.
pub fn render(cloud: &GaussianCloud, cam: &Camera, path: RenderPath) -> RenderOutput {
    render_with(cloud, cam, path, &RenderSettings::default(), None)
}

pub fn render_with(
    cloud: &GaussianCloud,
    cam: &Camera,
    path: RenderPath,
    settings: &RenderSettings,
    backdrop: Option<&Backdrop>,
) -> RenderOutput {
    let prep = prepare(cloud, cam, path, settings);
    let (w, h) = (cam.width, cam.height);
    let rows: Vec<Vec<PixelBlend>> = (0..h)
        .into_par_iter()
        .map(|y| {
            (0..w)
                .map(|x| blend_pixel(&prep, x, y, settings, |_| {}))
                .collect()
        })
        .collect();

    let mut color = Grid::new(w, h);
    let mut depth = Grid::new(w, h);
    let mut accum = Grid::new(w, h);
    let mut trans = Grid::new(w, h);
    for (y, row) in rows.into_iter().enumerate() {
        for (x, px) in row.into_iter().enumerate() {
            let (mut c, mut d) = (px.color, px.depth);
            if let Some(bg) = backdrop {
                c += bg.color.get(x, y) * px.tau;
                d += bg.depth.get(x, y) * px.tau;
            }
            color.set(x, y, c);
            depth.set(x, y, d);
            accum.set(x, y, px.weight_sum);
            trans.set(x, y, px.tau);
        }
    }
    RenderOutput {
        color,
        depth,
        accum_alpha: accum,
        transmittance: trans,
        path,
    }
}
