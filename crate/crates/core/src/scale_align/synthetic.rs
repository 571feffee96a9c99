//! Synthetic point-map priors with known per-record scales.
//!
//! Given per-view camera-frame points `Q_v` and poses `(R_v, t_v)`, the
//! record `(i, j)` with scale `k_ij` is
//!
//! ```text
//! X11_ij = Q_i / k_ij
//! X21_ij = R_i^T (R_j Q_j + k_ji t_j - k_ij t_i) / k_ij
//! ```
//!
//! so that the pairwise residual `s_ij T_i X - s_ji T_j Y` and the intra
//! residual both vanish at `s = k` (and at every positive multiple of it).

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Rotation3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ConfidenceMap, PointMap, PointMapRecord};
use crate::buffer::{DepthMap, Grid};
use crate::camera::{Camera, RigidTransform};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct SyntheticPriors {
    pub cameras: Vec<Camera>,
    pub poses: Vec<RigidTransform>,
    /// Camera-frame points of every view.
    pub points: Vec<PointMap>,
    pub records: Vec<PointMapRecord>,
    pub true_scales: BTreeMap<(usize, usize), f64>,
}

/// Camera-frame points `ray * depth`; pixels with non-positive depth are zero.
pub fn points_from_depth(cam: &Camera, depth: &DepthMap) -> Result<PointMap> {
    depth.ensure_dims(cam.width, cam.height)?;
    Ok(PointMap::from_fn(cam.width, cam.height, |x, y| {
        let d = *depth.get(x, y);
        if d > 0.0 {
            cam.ray(&Vector2::new(x as f64, y as f64)) * d
        } else {
            Vector3::zeros()
        }
    }))
}

/// Builds both directed records for every listed pair. Confidences are
/// drawn uniformly from `conf_range` and set to 0 where the source point is
/// undefined (zero); `noise` is the standard deviation of a relative
/// Gaussian perturbation of every point, radial about its frame origin.
pub fn records_from_points(
    poses: &[RigidTransform],
    points: &[PointMap],
    pairs: &[(usize, usize)],
    scales: &BTreeMap<(usize, usize), f64>,
    conf_range: (f64, f64),
    noise: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<PointMapRecord>> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out = Vec::new();
    for &(a, b) in pairs {
        for (i, j) in [(a, b), (b, a)] {
            let k_ij = *scales.get(&(i, j)).ok_or_else(|| {
                Error::InvalidParameter(format!("no scale for record ({i}, {j})"))
            })?;
            let k_ji = *scales.get(&(j, i)).ok_or_else(|| {
                Error::InvalidParameter(format!("no scale for record ({j}, {i})"))
            })?;
            let (pi, pj) = (&poses[i], &poses[j]);
            let x11 = points[i].map(|q| *q / k_ij);
            let x21 = points[j].map(|q| {
                pi.rotation.transpose() * (pj.rotation * q + pj.translation * k_ji - pi.translation * k_ij) / k_ij
            });
            let valid_i: Vec<bool> = points[i].as_slice().iter().map(|q| q.z > 0.0).collect();
            let valid_j: Vec<bool> = points[j].as_slice().iter().map(|q| q.z > 0.0).collect();
            let c11 = ConfidenceMap::from_vec(
                x11.width(),
                x11.height(),
                valid_i.iter().map(|v| if *v { rng.random_range(conf_range.0..=conf_range.1) } else { 0.0 }).collect(),
            )?;
            let c21 = ConfidenceMap::from_vec(
                x21.width(),
                x21.height(),
                valid_j.iter().map(|v| if *v { rng.random_range(conf_range.0..=conf_range.1) } else { 0.0 }).collect(),
            )?;
            let mut jitter = |p: Vector3<f64>| -> Vector3<f64> {
                if noise > 0.0 {
                    p * (1.0 + noise * normal.sample(rng))
                } else {
                    p
                }
            };
            let x11 = Grid::from_vec(x11.width(), x11.height(), x11.into_vec().into_iter().map(&mut jitter).collect())?;
            let x21 = Grid::from_vec(x21.width(), x21.height(), x21.into_vec().into_iter().map(&mut jitter).collect())?;
            out.push(PointMapRecord { i, j, x11, c11, x21, c21 });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RingConfig {
    pub views: usize,
    pub size: usize,
    pub radius: f64,
    /// Ground-truth scales are drawn log-uniformly from this range.
    pub scale_range: (f64, f64),
    pub noise: f64,
    pub seed: u64,
}

impl Default for RingConfig {
    fn default() -> Self {
        RingConfig {
            views: 5,
            size: 24,
            radius: 4.0,
            scale_range: (0.5, 2.0),
            noise: 0.0,
            seed: 7,
        }
    }
}

/// Views on a circle looking at the origin, each paired with its ring
/// neighbour, with smooth random depth fields.
pub fn ring(cfg: &RingConfig) -> Result<SyntheticPriors> {
    if cfg.views < 2 {
        return Err(Error::InvalidParameter("a ring needs at least two views".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut cameras = Vec::new();
    for v in 0..cfg.views {
        let phi = 2.0 * std::f64::consts::PI * v as f64 / cfg.views as f64;
        let eye = Vector3::new(cfg.radius * phi.sin(), 0.3 * (v as f64 - 1.0), -cfg.radius * phi.cos());
        cameras.push(Camera::look_at(eye, Vector3::zeros(), -Vector3::y(), cfg.size as f64, cfg.size, cfg.size)?);
    }
    let poses: Vec<RigidTransform> = cameras.iter().map(|c| c.cam_to_world()).collect();
    let mut points = Vec::new();
    for cam in &cameras {
        let (a, b, p1, p2): (f64, f64, f64, f64) = (
            rng.random_range(0.15..0.35),
            rng.random_range(0.15..0.35),
            rng.random_range(0.0..6.28),
            rng.random_range(0.0..6.28),
        );
        let depth = DepthMap::from_fn(cam.width, cam.height, |x, y| {
            cfg.radius - 0.5 + 0.6 * (a * x as f64 + p1).sin() * (b * y as f64 + p2).cos()
        });
        points.push(points_from_depth(cam, &depth)?);
    }
    let pairs: Vec<(usize, usize)> = if cfg.views == 2 {
        vec![(0, 1)]
    } else {
        (0..cfg.views).map(|v| (v.min((v + 1) % cfg.views), v.max((v + 1) % cfg.views))).collect()
    };
    let (lo, hi) = (cfg.scale_range.0.ln(), cfg.scale_range.1.ln());
    let mut true_scales = BTreeMap::new();
    for &(i, j) in &pairs {
        true_scales.insert((i, j), rng.random_range(lo..=hi).exp());
        true_scales.insert((j, i), rng.random_range(lo..=hi).exp());
    }
    let records = records_from_points(&poses, &points, &pairs, &true_scales, (0.5, 1.5), cfg.noise, &mut rng)?;
    Ok(SyntheticPriors {
        cameras,
        poses,
        points,
        records,
        true_scales,
    })
}

/// Random proper rotation, for tests.
pub fn random_rotation(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
    let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let angle = rng.random_range(-3.0..3.0);
    let axis = if axis.norm() > 1e-6 { axis.normalize() } else { Vector3::x() };
    *Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle).matrix()
}
