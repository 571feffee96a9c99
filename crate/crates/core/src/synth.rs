//! Deterministic synthetic datasets: a textured box seen from a ring of
//! cameras, the two-view plane-and-floater fixture, a translucent slab over
//! a textured plane, and the five-view point-map ring.

use std::collections::BTreeMap;

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::buffer::{DepthMap, ImageBuffer};
use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::floater_lab::{deadlock_fixture, BackgroundPlane, FixtureConfig};
use crate::geometry::{plane_depth, select_pairs, FeatureMatches};
use crate::render::{render_with, RenderPath, RenderSettings};
use crate::scale_align::synthetic::{points_from_depth, records_from_points, ring, RingConfig};
use crate::scale_align::PointMapRecord;
use crate::scene::{Gaussian, GaussianCloud, IDENTITY_QUAT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SceneKind {
    Box,
    PlaneFloater,
    TranslucentSlab,
    Ring,
}

impl SceneKind {
    pub fn name(self) -> &'static str {
        match self {
            SceneKind::Box => "box",
            SceneKind::PlaneFloater => "plane-floater",
            SceneKind::TranslucentSlab => "translucent-slab",
            SceneKind::Ring => "ring",
        }
    }
}

impl std::str::FromStr for SceneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "box" | "textured-box" => Ok(SceneKind::Box),
            "plane-floater" | "plane+floater" => Ok(SceneKind::PlaneFloater),
            "translucent-slab" | "slab" => Ok(SceneKind::TranslucentSlab),
            "ring" => Ok(SceneKind::Ring),
            _ => Err(Error::UnknownScene(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub kind: SceneKind,
    pub seed: u64,
    /// Relative noise of the generated point maps.
    pub noise: f64,
    /// Floater Gaussians injected into the box scene's initialization.
    pub floaters: usize,
}

impl SynthSpec {
    pub fn new(kind: SceneKind) -> Self {
        SynthSpec {
            kind,
            seed: 0,
            noise: 0.0,
            floaters: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub name: String,
    pub cameras: Vec<Camera>,
    pub images: Vec<ImageBuffer>,
    /// Exact depth of the opaque geometry; 0 where a ray hits nothing.
    pub depths: Vec<DepthMap>,
    /// Cloud the images were rendered from (empty when only a backdrop is used).
    pub reference: GaussianCloud,
    /// Suggested starting point for training.
    pub init: GaussianCloud,
    pub backdrop: Option<BackgroundPlane>,
    pub holdout: Vec<usize>,
    pub matches: FeatureMatches,
    /// World position of every track in `matches`.
    pub tracks: BTreeMap<u64, Vector3<f64>>,
    pub records: Vec<PointMapRecord>,
    pub true_scales: BTreeMap<(usize, usize), f64>,
}

impl SynthDataset {
    pub fn train_views(&self) -> Vec<usize> {
        (0..self.cameras.len()).filter(|v| !self.holdout.contains(v)).collect()
    }
}

pub fn synth_scene(spec: &SynthSpec) -> Result<SynthDataset> {
    match spec.kind {
        SceneKind::Box => textured_box(spec),
        SceneKind::PlaneFloater => plane_floater(),
        SceneKind::TranslucentSlab => translucent_slab(spec),
        SceneKind::Ring => ring_dataset(spec),
    }
}

pub const BOX_HALF: f64 = 1.0;
const BOX_GRID: usize = 12;
const BOX_SIZE: usize = 64;
const BOX_FOCAL: f64 = 80.0;
const BOX_RADIUS: f64 = 5.0;

/// Ray-box intersection against the axis-aligned cube of half-size `half`;
/// returns camera z of the nearest hit in front of the camera, or 0.
pub fn box_depth(cam: &Camera, half: f64) -> DepthMap {
    let o = cam.center();
    let rt = cam.rotation.transpose();
    DepthMap::from_fn(cam.width, cam.height, |x, y| {
        let d = rt * cam.ray(&Vector2::new(x as f64, y as f64));
        let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
        for a in 0..3 {
            if d[a].abs() < 1e-15 {
                if o[a].abs() > half {
                    return 0.0;
                }
                continue;
            }
            let (p, q) = ((-half - o[a]) / d[a], (half - o[a]) / d[a]);
            t0 = t0.max(p.min(q));
            t1 = t1.min(p.max(q));
        }
        if t1 >= t0 && t0 > 0.0 {
            t0
        } else {
            0.0
        }
    })
}

/// Smooth color of face `f` at face coordinates `(u, v)` in [-1, 1]^2.
pub fn box_texture(f: usize, u: f64, v: f64) -> Vector3<f64> {
    let base = [
        Vector3::new(0.75, 0.3, 0.25),
        Vector3::new(0.25, 0.65, 0.3),
        Vector3::new(0.3, 0.35, 0.75),
        Vector3::new(0.7, 0.65, 0.25),
        Vector3::new(0.6, 0.3, 0.65),
        Vector3::new(0.3, 0.65, 0.65),
    ][f];
    let k = f as f64;
    let pi = std::f64::consts::PI;
    let wave = Vector3::new(
        (pi * 0.8 * u + k).sin(),
        (pi * 0.8 * v + 2.0 * k).cos(),
        (pi * 0.5 * (u + v) + 3.0 * k).sin(),
    );
    (base + wave * 0.18).map(|c| c.clamp(0.05, 0.95))
}

/// Face frame: center offset direction (outward normal) and two tangents.
fn face_frame(f: usize) -> (Vector3<f64>, Vector3<f64>, Vector3<f64>, [f64; 4]) {
    let h = std::f64::consts::FRAC_1_SQRT_2;
    match f {
        0 => (Vector3::x(), Vector3::y(), Vector3::z(), [h, 0.0, h, 0.0]),
        1 => (-Vector3::x(), Vector3::y(), Vector3::z(), [h, 0.0, -h, 0.0]),
        2 => (Vector3::y(), Vector3::z(), Vector3::x(), [h, -h, 0.0, 0.0]),
        3 => (-Vector3::y(), Vector3::z(), Vector3::x(), [h, h, 0.0, 0.0]),
        4 => (Vector3::z(), Vector3::x(), Vector3::y(), IDENTITY_QUAT),
        _ => (-Vector3::z(), Vector3::x(), Vector3::y(), IDENTITY_QUAT),
    }
}

/// Flat Gaussians tiling the cube surface, each colored by the texture at
/// its center. The rotation maps the local z axis onto the face normal.
pub fn box_surface_cloud(half: f64, grid: usize) -> GaussianCloud {
    box_surface_cloud_with(half, grid, 0.95, 0.6)
}

pub fn box_surface_cloud_with(half: f64, grid: usize, alpha: f64, spread: f64) -> GaussianCloud {
    let step = 2.0 * half / grid as f64;
    let mut out = Vec::new();
    for f in 0..6 {
        let (n, t1, t2, rot) = face_frame(f);
        for a in 0..grid {
            for b in 0..grid {
                let u = -1.0 + (a as f64 + 0.5) * 2.0 / grid as f64;
                let v = -1.0 + (b as f64 + 0.5) * 2.0 / grid as f64;
                let mu = n * half + t1 * (u * half) + t2 * (v * half);
                out.push(Gaussian {
                    mu,
                    alpha,
                    alpha_aux: 1.0,
                    color: box_texture(f, u, v),
                    scale: Vector3::new(spread * step, spread * step, 0.05 * step),
                    rot,
                });
            }
        }
    }
    GaussianCloud::new(out)
}

pub fn box_cameras(size: usize) -> Result<Vec<Camera>> {
    let mut cams = Vec::new();
    let views: Vec<(f64, f64)> = (0..8)
        .map(|k| (k as f64 * 45.0, if k % 2 == 0 { 20.0 } else { 35.0 }))
        .chain(std::iter::once((8.0, 24.0)))
        .collect();
    let focal = BOX_FOCAL * size as f64 / BOX_SIZE as f64;
    for (az, el) in views {
        let (az, el) = (az.to_radians(), el.to_radians());
        let eye = Vector3::new(
            BOX_RADIUS * el.cos() * az.sin(),
            -BOX_RADIUS * el.sin(),
            -BOX_RADIUS * el.cos() * az.cos(),
        );
        cams.push(Camera::look_at(eye, Vector3::zeros(), -Vector3::y(), focal, size, size)?);
    }
    Ok(cams)
}

/// Tracks visible in each view: projection inside the image and camera depth
/// within `tol` of the exact depth at the nearest pixel.
pub fn visible_tracks(cams: &[Camera], depths: &[DepthMap], points: &BTreeMap<u64, Vector3<f64>>, tol: f64) -> FeatureMatches {
    let mut m = FeatureMatches::new(cams.len());
    for (v, (cam, depth)) in cams.iter().zip(depths).enumerate() {
        for (t, p) in points {
            let Some((px, z)) = cam.project(p) else { continue };
            if z <= 0.0 || !cam.contains(&px) {
                continue;
            }
            let (x, y) = (px.x.round() as usize, px.y.round() as usize);
            if x >= cam.width || y >= cam.height {
                continue;
            }
            let d = *depth.get(x, y);
            if d > 0.0 && (d - z).abs() < tol {
                m.observe(v, *t, px);
            }
        }
    }
    m
}

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo.ln()..=hi.ln()).exp()
}

/// Point-map records for every selected pair among `views`, with random
/// per-record scales.
fn pair_records(
    cams: &[Camera],
    depths: &[DepthMap],
    pairs: &[(usize, usize)],
    noise: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<PointMapRecord>, BTreeMap<(usize, usize), f64>)> {
    let poses: Vec<_> = cams.iter().map(|c| c.cam_to_world()).collect();
    let points = cams.iter().zip(depths).map(|(c, d)| points_from_depth(c, d)).collect::<Result<Vec<_>>>()?;
    let mut scales = BTreeMap::new();
    for &(i, j) in pairs {
        scales.insert((i, j), log_uniform(rng, 0.5, 2.0));
        scales.insert((j, i), log_uniform(rng, 0.5, 2.0));
    }
    let records = records_from_points(&poses, &points, pairs, &scales, (0.5, 1.5), noise, rng)?;
    Ok((records, scales))
}

/// Training start for the box: reference centers jittered by a tenth of the
/// grid step, scales perturbed by up to 20%, gray colors, opacity 0.5, plus
/// `floaters` Gaussians in front of `floater_cam`.
pub fn box_init(reference: &GaussianCloud, floaters: usize, floater_cam: &Camera, rng: &mut ChaCha8Rng) -> GaussianCloud {
    let step = 2.0 * BOX_HALF / BOX_GRID as f64;
    let mut out: Vec<Gaussian> = reference
        .iter()
        .map(|g| {
            let jitter = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            Gaussian {
                mu: g.mu + jitter * (0.1 * step),
                alpha: 0.5,
                alpha_aux: 1.0,
                color: Vector3::repeat(0.5),
                scale: g.scale.map(|s| s * rng.random_range(0.8..1.2)),
                rot: g.rot,
            }
        })
        .collect();
    out.extend(box_floaters(floaters, floater_cam, rng));
    GaussianCloud::new(out)
}

/// Isotropic floaters close to `cam`, each on a ray through the central
/// part of the image at camera depth 1.2 to 2.4.
pub fn box_floaters(n: usize, cam: &Camera, rng: &mut ChaCha8Rng) -> Vec<Gaussian> {
    let half = 0.22 * cam.width.min(cam.height) as f64;
    (0..n)
        .map(|_| {
            let px = Vector2::new(cam.cx + rng.random_range(-half..half), cam.cy + rng.random_range(-half..half));
            let z = rng.random_range(1.2..2.4);
            let mu = cam.unproject(&px, z).expect("positive depth");
            let gray = rng.random_range(0.4..0.6);
            Gaussian::isotropic(mu, rng.random_range(0.06..0.12), 0.7, Vector3::repeat(gray))
        })
        .collect()
}

fn textured_box(spec: &SynthSpec) -> Result<SynthDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let cameras = box_cameras(BOX_SIZE)?;
    let reference = box_surface_cloud(BOX_HALF, BOX_GRID);
    let settings = RenderSettings::default();
    let images: Vec<ImageBuffer> = cameras
        .iter()
        .map(|c| render_with(&reference, c, RenderPath::Appearance, &settings, None).color)
        .collect();
    let depths: Vec<DepthMap> = cameras.iter().map(|c| box_depth(c, BOX_HALF)).collect();
    let tracks: BTreeMap<u64, Vector3<f64>> = reference.iter().enumerate().map(|(k, g)| (k as u64, g.mu)).collect();
    let holdout = vec![8];
    let matches = visible_tracks(&cameras, &depths, &tracks, 0.1);
    let train: Vec<usize> = (0..8).collect();
    let sub_cams: Vec<Camera> = train.iter().map(|&v| cameras[v].clone()).collect();
    let sub_matches = FeatureMatches {
        views: train.iter().map(|&v| matches.views[v].clone()).collect(),
    };
    let pairs: Vec<(usize, usize)> = select_pairs(&sub_matches, &sub_cams)?
        .iter()
        .map(|p| (train[p.i], train[p.j]))
        .collect();
    let (records, true_scales) = pair_records(&cameras, &depths, &pairs, spec.noise, &mut rng)?;
    let init = box_init(&reference, spec.floaters, &cameras[0], &mut rng);
    Ok(SynthDataset {
        name: SceneKind::Box.name().into(),
        cameras,
        images,
        depths,
        reference,
        init,
        backdrop: None,
        holdout,
        matches,
        tracks,
        records,
        true_scales,
    })
}

fn plane_floater() -> Result<SynthDataset> {
    let cfg = FixtureConfig::default();
    let views = deadlock_fixture(&cfg)?;
    let mut images = Vec::new();
    let mut depths = Vec::new();
    let mut cameras = Vec::new();
    for v in &views {
        let mut img = ImageBuffer::new(v.camera.width, v.camera.height);
        for (&(x, y), c) in v.rays.iter().zip(&v.gt_colors) {
            img.set(x, y, *c);
        }
        images.push(img);
        depths.push(plane_depth(&v.camera, &v.background.normal, v.background.offset));
        cameras.push(v.camera.clone());
    }
    Ok(SynthDataset {
        name: SceneKind::PlaneFloater.name().into(),
        matches: FeatureMatches::new(cameras.len()),
        cameras,
        images,
        depths,
        reference: GaussianCloud::default(),
        init: views[0].floater.clone(),
        backdrop: Some(views[0].background),
        holdout: Vec::new(),
        tracks: BTreeMap::new(),
        records: Vec::new(),
        true_scales: BTreeMap::new(),
    })
}

fn translucent_slab(spec: &SynthSpec) -> Result<SynthDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let size = 48;
    let plane_z = 4.0;
    let cameras = [-0.6, -0.2, 0.2, 0.6]
        .iter()
        .map(|&x| {
            Camera::new(
                48.0,
                48.0,
                (size as f64 - 1.0) / 2.0,
                (size as f64 - 1.0) / 2.0,
                nalgebra::Matrix3::identity(),
                Vector3::new(-x, 0.0, 0.0),
                size,
                size,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let mut gs = Vec::new();
    let n = 20;
    let step = 6.0 / n as f64;
    for a in 0..n {
        for b in 0..n {
            let (u, v) = (-3.0 + (a as f64 + 0.5) * step, -3.0 + (b as f64 + 0.5) * step);
            let mut g = Gaussian::isotropic(Vector3::new(u, v, plane_z), 0.6 * step, 0.95, box_texture(a % 6, u / 3.0, v / 3.0));
            g.scale.z = 0.05 * step;
            gs.push(g);
        }
    }
    let m = 6;
    let slab_step = 1.6 / m as f64;
    for a in 0..m {
        for b in 0..m {
            let (u, v) = (-0.8 + (a as f64 + 0.5) * slab_step, -0.8 + (b as f64 + 0.5) * slab_step);
            let mut g = Gaussian::isotropic(Vector3::new(u, v, 2.5), 0.6 * slab_step, 0.35, Vector3::new(0.4, 0.6, 0.9));
            g.scale.z = 0.05 * slab_step;
            gs.push(g);
        }
    }
    let reference = GaussianCloud::new(gs);
    let settings = RenderSettings::default();
    let images = cameras
        .iter()
        .map(|c| render_with(&reference, c, RenderPath::Appearance, &settings, None).color)
        .collect();
    let depths: Vec<DepthMap> = cameras.iter().map(|c| plane_depth(c, &Vector3::z(), plane_z)).collect();
    let pairs = vec![(0, 1), (1, 2), (2, 3)];
    let (records, true_scales) = pair_records(&cameras, &depths, &pairs, spec.noise, &mut rng)?;
    Ok(SynthDataset {
        name: SceneKind::TranslucentSlab.name().into(),
        matches: FeatureMatches::new(cameras.len()),
        cameras,
        images,
        depths,
        init: reference.clone(),
        reference,
        backdrop: None,
        holdout: Vec::new(),
        tracks: BTreeMap::new(),
        records,
        true_scales,
    })
}

fn ring_dataset(spec: &SynthSpec) -> Result<SynthDataset> {
    let s = ring(&RingConfig {
        noise: spec.noise,
        seed: spec.seed,
        ..RingConfig::default()
    })?;
    let depths: Vec<DepthMap> = s.points.iter().map(|p| p.map(|q| q.z)).collect();
    let images = depths
        .iter()
        .map(|d| {
            let m = d.as_slice().iter().fold(0.0f64, |a, v| a.max(*v)).max(1e-12);
            d.map(|v| Vector3::repeat(v / m))
        })
        .collect();
    Ok(SynthDataset {
        name: SceneKind::Ring.name().into(),
        matches: FeatureMatches::new(s.cameras.len()),
        cameras: s.cameras,
        images,
        depths,
        reference: GaussianCloud::default(),
        init: GaussianCloud::default(),
        backdrop: None,
        holdout: Vec::new(),
        tracks: BTreeMap::new(),
        records: s.records,
        true_scales: s.true_scales,
    })
}
