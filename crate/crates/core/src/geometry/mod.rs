//! Multi-view depth regularization: forward depth warping, the symmetric
//! consistency loss between geometric-path depths, the confidence-weighted
//! prior loss, and training pair selection.

pub mod homography;
pub mod pairs;

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::buffer::{DepthMap, Grid, Mask};
use crate::camera::Camera;
use crate::error::{Error, Result};

pub use pairs::{
    evaluate_pair, pairs_from_table, pairs_to_table, passes, select_pairs, FeatureMatches, ViewPair,
};

/// Depth map of view `i` forward-warped into the pixel grid of view `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpedDepth {
    pub depth: DepthMap,
    pub mask: Mask,
    /// For every written target pixel: the source pixel index and
    /// `d(target depth) / d(source depth)`.
    pub source: Grid<Option<(usize, f64)>>,
}

impl WarpedDepth {
    pub fn valid_count(&self) -> usize {
        self.mask.as_slice().iter().filter(|m| **m).count()
    }
}

/// Relative pose mapping view-`i` camera coordinates into view `j`.
fn relative_pose(cam_i: &Camera, cam_j: &Camera) -> (Matrix3<f64>, Vector3<f64>) {
    if cam_i.rotation == cam_j.rotation {
        (Matrix3::identity(), cam_j.translation - cam_i.translation)
    } else {
        let m = cam_j.rotation * cam_i.rotation.transpose();
        (m, cam_j.translation - m * cam_i.translation)
    }
}

/// Forward nearest-pixel scatter of `d_i` into view `j`; the nearer depth
/// wins when several source pixels land on one target pixel.
pub fn warp_depth(d_i: &DepthMap, cam_i: &Camera, cam_j: &Camera) -> Result<WarpedDepth> {
    d_i.ensure_dims(cam_i.width, cam_i.height)?;
    let (w, h) = (cam_j.width, cam_j.height);
    let mut depth = DepthMap::new(w, h);
    let mut mask = Mask::new(w, h);
    let mut source: Grid<Option<(usize, f64)>> = Grid::new(w, h);
    let (m, b) = relative_pose(cam_i, cam_j);
    for y in 0..cam_i.height {
        for x in 0..cam_i.width {
            let z = *d_i.get(x, y);
            if !(z > 0.0) || !z.is_finite() {
                continue;
            }
            let ray = cam_i.ray(&Vector2::new(x as f64, y as f64));
            let dir = m * ray;
            let xj = dir * z + b;
            if !(xj.z > 0.0) {
                continue;
            }
            let Some((uv, zj)) = cam_j.project_camera(&xj) else { continue };
            if !cam_j.contains(&uv) {
                continue;
            }
            let (tx, ty) = (uv.x.round() as usize, uv.y.round() as usize);
            if !mask.get(tx, ty) || zj < *depth.get(tx, ty) {
                depth.set(tx, ty, zj);
                mask.set(tx, ty, true);
                source.set(tx, ty, Some((d_i.index(x, y), dir.z)));
            }
        }
    }
    Ok(WarpedDepth { depth, mask, source })
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

#[derive(Debug, Clone, PartialEq)]
pub struct ConsisLoss {
    pub value: f64,
    pub grad_i: DepthMap,
    pub grad_j: DepthMap,
    pub valid_ij: usize,
    pub valid_ji: usize,
    /// Set when neither direction had a valid pixel.
    pub empty: bool,
}

/// Masked mean L1 of one direction, accumulating gradients into the source
/// (`grad_src`) and the directly compared map (`grad_dst`).
fn directed_term(
    d_src: &DepthMap,
    d_dst: &DepthMap,
    cam_src: &Camera,
    cam_dst: &Camera,
    grad_src: &mut DepthMap,
    grad_dst: &mut DepthMap,
    occlusion_tol: Option<f64>,
) -> Result<(f64, usize)> {
    let warped = warp_depth(d_src, cam_src, cam_dst)?;
    let visible = |k: usize| match occlusion_tol {
        Some(tol) => warped.depth.as_slice()[k] <= d_dst.as_slice()[k] * (1.0 + tol),
        None => true,
    };
    let valid: Vec<usize> = (0..warped.depth.len())
        .filter(|&k| warped.mask.as_slice()[k] && d_dst.as_slice()[k] > 0.0 && visible(k))
        .collect();
    if valid.is_empty() {
        return Ok((0.0, 0));
    }
    let n = valid.len() as f64;
    let mut sum = 0.0;
    for k in valid.iter().copied() {
        let diff = warped.depth.as_slice()[k] - d_dst.as_slice()[k];
        sum += diff.abs();
        let s = sign(diff) / n;
        let (src, coef) = warped.source.as_slice()[k].expect("masked pixel has a source");
        grad_src.as_mut_slice()[src] += s * coef;
        grad_dst.as_mut_slice()[k] -= s;
    }
    Ok((sum / n, valid.len()))
}

/// Symmetric masked mean-L1 between each depth map warped into the other
/// view and that view's own depth. Projection coordinates are treated as
/// constants; only depth values carry gradient.
pub fn consis_loss(d_i: &DepthMap, d_j: &DepthMap, cam_i: &Camera, cam_j: &Camera) -> Result<ConsisLoss> {
    consis_loss_with(d_i, d_j, cam_i, cam_j, None)
}

/// [`consis_loss`] that also drops pixels where the warped point lies more
/// than `occlusion_tol` (relative) behind the destination surface, i.e. is
/// hidden in the destination view.
pub fn consis_loss_with(
    d_i: &DepthMap,
    d_j: &DepthMap,
    cam_i: &Camera,
    cam_j: &Camera,
    occlusion_tol: Option<f64>,
) -> Result<ConsisLoss> {
    d_i.ensure_dims(cam_i.width, cam_i.height)?;
    d_j.ensure_dims(cam_j.width, cam_j.height)?;
    let mut grad_i = DepthMap::new(cam_i.width, cam_i.height);
    let mut grad_j = DepthMap::new(cam_j.width, cam_j.height);
    let (a, valid_ij) = directed_term(d_i, d_j, cam_i, cam_j, &mut grad_i, &mut grad_j, occlusion_tol)?;
    let (b, valid_ji) = directed_term(d_j, d_i, cam_j, cam_i, &mut grad_j, &mut grad_i, occlusion_tol)?;
    let empty = valid_ij == 0 && valid_ji == 0;
    if empty {
        log::warn!("consistency loss: no valid overlap between the two views");
    }
    Ok(ConsisLoss {
        value: a + b,
        grad_i,
        grad_j,
        valid_ij,
        valid_ji,
        empty,
    })
}

/// Scale-aligned monocular depth prior for one ordered view pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairPrior {
    pub view: usize,
    pub partner: usize,
    /// Prior depth already multiplied by the solved pair scale; 0 marks
    /// pixels without a prior.
    pub depth: DepthMap,
    pub confidence: Grid<f64>,
}

impl PairPrior {
    pub fn validate(&self) -> Result<()> {
        self.depth.ensure_same(&self.confidence)?;
        if self.confidence.as_slice().iter().any(|c| !(*c >= 0.0)) {
            return Err(Error::InvalidParameter("prior confidence must be non-negative".into()));
        }
        Ok(())
    }

    pub fn support(&self) -> usize {
        self.depth.as_slice().iter().filter(|d| **d > 0.0).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorLoss {
    pub value: f64,
    pub grad: DepthMap,
    /// Set when the prior has no positive depth.
    pub empty: bool,
}

/// Confidence-weighted absolute deviation over the prior's support,
/// normalized by the support size.
pub fn prior_loss(d_s: &DepthMap, prior: &PairPrior) -> Result<PriorLoss> {
    prior.validate()?;
    d_s.ensure_same(&prior.depth)?;
    let count = prior.support();
    let mut grad = DepthMap::new(d_s.width(), d_s.height());
    if count == 0 {
        log::warn!("prior loss: view {} has an all-zero prior from pair ({}, {})", prior.view, prior.view, prior.partner);
        return Ok(PriorLoss {
            value: 0.0,
            grad,
            empty: true,
        });
    }
    let n = count as f64;
    let mut sum = 0.0;
    for k in 0..d_s.len() {
        let d = prior.depth.as_slice()[k];
        if d > 0.0 {
            let c = prior.confidence.as_slice()[k];
            let diff = d_s.as_slice()[k] - d;
            sum += c * diff.abs();
            grad.as_mut_slice()[k] = c * sign(diff) / n;
        }
    }
    Ok(PriorLoss {
        value: sum / n,
        grad,
        empty: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeometryWeights {
    pub lambda_consis: f64,
    pub lambda_prior: f64,
}

impl Default for GeometryWeights {
    fn default() -> Self {
        GeometryWeights {
            lambda_consis: 0.05,
            lambda_prior: 0.005,
        }
    }
}

/// `lambda_consis * sum(consis) + lambda_prior * sum(prior)`.
pub fn geometry_loss(consis: &[ConsisLoss], prior: &[PriorLoss], w: &GeometryWeights) -> f64 {
    w.lambda_consis * consis.iter().map(|c| c.value).sum::<f64>()
        + w.lambda_prior * prior.iter().map(|p| p.value).sum::<f64>()
}

/// Analytic depth of the plane `n . X = offset` seen from `cam`; pixels whose
/// ray misses the plane or hits it behind the camera are 0.
pub fn plane_depth(cam: &Camera, normal: &Vector3<f64>, offset: f64) -> DepthMap {
    let c = cam.center();
    let rt = cam.rotation.transpose();
    DepthMap::from_fn(cam.width, cam.height, |x, y| {
        let dir = rt * cam.ray(&Vector2::new(x as f64, y as f64));
        let denom = normal.dot(&dir);
        if denom.abs() < 1e-12 {
            return 0.0;
        }
        let z = (offset - normal.dot(&c)) / denom;
        if z > 0.0 {
            z
        } else {
            0.0
        }
    })
}

#[cfg(test)]
mod tests;
