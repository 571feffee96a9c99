//! COLMAP sparse model, text export layout (`cameras.txt`, `images.txt`,
//! `points3D.txt`).
//!
//! COLMAP places the center of the top-left pixel at (0.5, 0.5); this crate
//! puts pixel centers at integer coordinates, so principal points and
//! keypoints are shifted by 0.5 on the way in and out.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector2, Vector3};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::geometry::FeatureMatches;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CameraModel {
    SimplePinhole,
    Pinhole,
}

impl CameraModel {
    pub fn name(self) -> &'static str {
        match self {
            CameraModel::SimplePinhole => "SIMPLE_PINHOLE",
            CameraModel::Pinhole => "PINHOLE",
        }
    }

    fn param_count(self) -> usize {
        match self {
            CameraModel::SimplePinhole => 3,
            CameraModel::Pinhole => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColmapCamera {
    pub id: u32,
    pub model: CameraModel,
    pub width: usize,
    pub height: usize,
    /// Model parameters in COLMAP order and pixel convention.
    pub params: Vec<f64>,
}

impl ColmapCamera {
    /// `(fx, fy, cx, cy)` with integer pixel centers.
    pub fn intrinsics(&self) -> (f64, f64, f64, f64) {
        match self.model {
            CameraModel::SimplePinhole => (self.params[0], self.params[0], self.params[1] - 0.5, self.params[2] - 0.5),
            CameraModel::Pinhole => (self.params[0], self.params[1], self.params[2] - 0.5, self.params[3] - 0.5),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Keypoint {
    /// Pixel position in COLMAP convention.
    pub xy: Vector2<f64>,
    pub point3d_id: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColmapImage {
    pub id: u32,
    /// World-to-camera rotation as a unit quaternion `[w, x, y, z]`.
    pub qvec: [f64; 4],
    pub tvec: Vector3<f64>,
    pub camera_id: u32,
    pub name: String,
    pub keypoints: Vec<Keypoint>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColmapPoint {
    pub id: u64,
    pub xyz: Vector3<f64>,
    pub rgb: [u8; 3],
    pub error: f64,
    /// `(image id, keypoint index)` observations.
    pub track: Vec<(u32, usize)>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseModel {
    pub cameras: BTreeMap<u32, ColmapCamera>,
    pub images: BTreeMap<u32, ColmapImage>,
    pub points: BTreeMap<u64, ColmapPoint>,
}

struct Fields<'a> {
    file: &'a str,
    line: usize,
    items: Vec<&'a str>,
    pos: usize,
}

impl<'a> Fields<'a> {
    fn new(file: &'a str, line: usize, text: &'a str) -> Self {
        Fields {
            file,
            line,
            items: text.split_whitespace().collect(),
            pos: 0,
        }
    }

    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            file: self.file.into(),
            line: self.line,
            message: message.into(),
        }
    }

    fn next(&mut self, what: &str) -> Result<&'a str> {
        let v = self.items.get(self.pos).copied().ok_or_else(|| self.err(format!("missing {what}")))?;
        self.pos += 1;
        Ok(v)
    }

    fn parse<T: std::str::FromStr>(&mut self, what: &str) -> Result<T> {
        let s = self.next(what)?;
        s.parse().map_err(|_| self.err(format!("bad {what} `{s}`")))
    }

    fn float(&mut self, what: &str) -> Result<f64> {
        let v: f64 = self.parse(what)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(self.err(format!("non-finite {what}")))
        }
    }

    fn remaining(&self) -> usize {
        self.items.len() - self.pos
    }

    fn finish(&self) -> Result<()> {
        if self.remaining() == 0 {
            Ok(())
        } else {
            Err(self.err(format!("{} unexpected trailing fields", self.remaining())))
        }
    }
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(k, l)| (k + 1, l.trim()))
        .filter(|(_, l)| !l.starts_with('#'))
}

fn parse_cameras(text: &str) -> Result<BTreeMap<u32, ColmapCamera>> {
    const FILE: &str = "cameras.txt";
    let mut out = BTreeMap::new();
    for (ln, line) in content_lines(text) {
        if line.is_empty() {
            continue;
        }
        let mut f = Fields::new(FILE, ln, line);
        let id: u32 = f.parse("camera id")?;
        let model = match f.next("camera model")? {
            "PINHOLE" => CameraModel::Pinhole,
            "SIMPLE_PINHOLE" => CameraModel::SimplePinhole,
            other => return Err(Error::UnsupportedCameraModel(other.to_string())),
        };
        let width: usize = f.parse("width")?;
        let height: usize = f.parse("height")?;
        if width == 0 || height == 0 || width > 1 << 20 || height > 1 << 20 {
            return Err(f.err("image size out of range"));
        }
        let params = (0..model.param_count()).map(|_| f.float("camera parameter")).collect::<Result<Vec<_>>>()?;
        f.finish()?;
        let focal_ok = match model {
            CameraModel::SimplePinhole => params[0] > 0.0,
            CameraModel::Pinhole => params[0] > 0.0 && params[1] > 0.0,
        };
        if !focal_ok {
            return Err(f.err("focal length must be positive"));
        }
        if out.insert(id, ColmapCamera { id, model, width, height, params }).is_some() {
            return Err(f.err(format!("duplicate camera id {id}")));
        }
    }
    Ok(out)
}

fn parse_images(text: &str) -> Result<BTreeMap<u32, ColmapImage>> {
    const FILE: &str = "images.txt";
    let mut out = BTreeMap::new();
    let mut pending: Option<ColmapImage> = None;
    for (ln, line) in content_lines(text) {
        match pending.take() {
            None => {
                if line.is_empty() {
                    continue;
                }
                let mut f = Fields::new(FILE, ln, line);
                let id: u32 = f.parse("image id")?;
                let mut q = [0.0; 4];
                for v in q.iter_mut() {
                    *v = f.float("quaternion component")?;
                }
                let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
                if !(n > 1e-12) {
                    return Err(f.err("zero quaternion"));
                }
                q.iter_mut().for_each(|v| *v /= n);
                let tvec = Vector3::new(f.float("tx")?, f.float("ty")?, f.float("tz")?);
                let camera_id: u32 = f.parse("camera id")?;
                let name = f.next("image name")?.to_string();
                f.finish()?;
                pending = Some(ColmapImage {
                    id,
                    qvec: q,
                    tvec,
                    camera_id,
                    name,
                    keypoints: Vec::new(),
                });
            }
            Some(mut img) => {
                let mut f = Fields::new(FILE, ln, line);
                if f.remaining() % 3 != 0 {
                    return Err(f.err("keypoint line must hold X Y POINT3D_ID triples"));
                }
                while f.remaining() > 0 {
                    let xy = Vector2::new(f.float("keypoint x")?, f.float("keypoint y")?);
                    let pid: i64 = f.parse("point3D id")?;
                    let point3d_id = match pid {
                        -1 => None,
                        p if p >= 0 => Some(p as u64),
                        _ => return Err(f.err(format!("invalid point3D id {pid}"))),
                    };
                    img.keypoints.push(Keypoint { xy, point3d_id });
                }
                if out.contains_key(&img.id) {
                    return Err(f.err(format!("duplicate image id {}", img.id)));
                }
                out.insert(img.id, img);
            }
        }
    }
    if let Some(img) = pending {
        if out.insert(img.id, img).is_some() {
            return Err(Error::Parse {
                file: FILE.into(),
                line: text.lines().count(),
                message: "duplicate image id".into(),
            });
        }
    }
    Ok(out)
}

fn parse_points(text: &str) -> Result<BTreeMap<u64, ColmapPoint>> {
    const FILE: &str = "points3D.txt";
    let mut out = BTreeMap::new();
    for (ln, line) in content_lines(text) {
        if line.is_empty() {
            continue;
        }
        let mut f = Fields::new(FILE, ln, line);
        let id: u64 = f.parse("point id")?;
        let xyz = Vector3::new(f.float("x")?, f.float("y")?, f.float("z")?);
        let rgb = [f.parse("red")?, f.parse("green")?, f.parse("blue")?];
        let error = f.float("reprojection error")?;
        if f.remaining() % 2 != 0 {
            return Err(f.err("track must hold IMAGE_ID POINT2D_IDX pairs"));
        }
        let mut track = Vec::new();
        while f.remaining() > 0 {
            track.push((f.parse("track image id")?, f.parse("track keypoint index")?));
        }
        if out.insert(id, ColmapPoint { id, xyz, rgb, error, track }).is_some() {
            return Err(f.err(format!("duplicate point id {id}")));
        }
    }
    Ok(out)
}

fn structural(message: String) -> Error {
    Error::Format(message)
}

impl SparseModel {
    /// Cross-file references: image cameras exist, keypoint tracks exist and
    /// track observations point at existing keypoints.
    pub fn validate(&self) -> Result<()> {
        for img in self.images.values() {
            if !self.cameras.contains_key(&img.camera_id) {
                return Err(structural(format!("image {} references missing camera {}", img.id, img.camera_id)));
            }
            if let Some(p) = img.keypoints.iter().filter_map(|k| k.point3d_id).find(|p| !self.points.contains_key(p)) {
                return Err(structural(format!("image {} references missing point {p}", img.id)));
            }
        }
        for p in self.points.values() {
            for &(img, k) in &p.track {
                let ok = self.images.get(&img).is_some_and(|i| k < i.keypoints.len());
                if !ok {
                    return Err(structural(format!("point {} observes missing keypoint {k} of image {img}", p.id)));
                }
            }
        }
        Ok(())
    }

    /// Cameras of every image, in image-id order.
    pub fn to_cameras(&self) -> Result<Vec<Camera>> {
        self.images
            .values()
            .map(|img| {
                let c = self
                    .cameras
                    .get(&img.camera_id)
                    .ok_or_else(|| structural(format!("image {} references missing camera {}", img.id, img.camera_id)))?;
                let (fx, fy, cx, cy) = c.intrinsics();
                let q = UnitQuaternion::from_quaternion(Quaternion::new(img.qvec[0], img.qvec[1], img.qvec[2], img.qvec[3]));
                let r: Matrix3<f64> = *q.to_rotation_matrix().matrix();
                Camera::new(fx, fy, cx, cy, r, img.tvec, c.width, c.height)
            })
            .collect()
    }

    /// Observed track pixels (integer-center convention) per image, views in
    /// image-id order.
    pub fn to_matches(&self) -> FeatureMatches {
        let mut m = FeatureMatches::new(self.images.len());
        for (v, img) in self.images.values().enumerate() {
            for k in &img.keypoints {
                if let Some(p) = k.point3d_id {
                    m.observe(v, p, k.xy - Vector2::repeat(0.5));
                }
            }
        }
        m
    }

    pub fn image_names(&self) -> Vec<String> {
        self.images.values().map(|i| i.name.clone()).collect()
    }

    /// Model with one PINHOLE camera per view, image ids `1..`, and the given
    /// tracks (integer-center pixels, world positions).
    pub fn from_views(
        cameras: &[Camera],
        names: &[String],
        matches: &FeatureMatches,
        points: &BTreeMap<u64, Vector3<f64>>,
    ) -> Result<Self> {
        if cameras.len() != names.len() || cameras.len() != matches.views.len() {
            return Err(Error::InvalidParameter("cameras, names and matches must have one entry per view".into()));
        }
        let mut model = SparseModel::default();
        for (v, (cam, name)) in cameras.iter().zip(names).enumerate() {
            let id = v as u32 + 1;
            model.cameras.insert(
                id,
                ColmapCamera {
                    id,
                    model: CameraModel::Pinhole,
                    width: cam.width,
                    height: cam.height,
                    params: vec![cam.fx, cam.fy, cam.cx + 0.5, cam.cy + 0.5],
                },
            );
            let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(cam.rotation));
            let keypoints = matches.views[v]
                .iter()
                .map(|(t, p)| Keypoint {
                    xy: p + Vector2::repeat(0.5),
                    point3d_id: Some(*t),
                })
                .collect();
            model.images.insert(
                id,
                ColmapImage {
                    id,
                    qvec: [q.w, q.i, q.j, q.k],
                    tvec: cam.translation,
                    camera_id: id,
                    name: name.clone(),
                    keypoints,
                },
            );
        }
        for (t, xyz) in points {
            let track = model
                .images
                .values()
                .filter_map(|img| img.keypoints.iter().position(|k| k.point3d_id == Some(*t)).map(|k| (img.id, k)))
                .collect();
            model.points.insert(
                *t,
                ColmapPoint {
                    id: *t,
                    xyz: *xyz,
                    rgb: [128, 128, 128],
                    error: 0.0,
                    track,
                },
            );
        }
        model.validate()?;
        Ok(model)
    }

    /// Text of `(cameras.txt, images.txt, points3D.txt)`.
    pub fn to_strings(&self) -> (String, String, String) {
        let mut cams = String::from("# Camera list with one line of data per camera:\n#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n");
        for c in self.cameras.values() {
            let _ = write!(cams, "{} {} {} {}", c.id, c.model.name(), c.width, c.height);
            for p in &c.params {
                let _ = write!(cams, " {p:?}");
            }
            cams.push('\n');
        }
        let mut imgs = String::from(
            "# Image list with two lines of data per image:\n#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n#   POINTS2D[] as (X, Y, POINT3D_ID)\n",
        );
        for i in self.images.values() {
            let q = i.qvec;
            let _ = writeln!(
                imgs,
                "{} {:?} {:?} {:?} {:?} {:?} {:?} {:?} {} {}",
                i.id, q[0], q[1], q[2], q[3], i.tvec.x, i.tvec.y, i.tvec.z, i.camera_id, i.name
            );
            let kp: Vec<String> = i
                .keypoints
                .iter()
                .map(|k| format!("{:?} {:?} {}", k.xy.x, k.xy.y, k.point3d_id.map_or(-1, |p| p as i64)))
                .collect();
            imgs.push_str(&kp.join(" "));
            imgs.push('\n');
        }
        let mut pts = String::from("# 3D point list with one line of data per point:\n#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)\n");
        for p in self.points.values() {
            let _ = write!(
                pts,
                "{} {:?} {:?} {:?} {} {} {} {:?}",
                p.id, p.xyz.x, p.xyz.y, p.xyz.z, p.rgb[0], p.rgb[1], p.rgb[2], p.error
            );
            for (img, k) in &p.track {
                let _ = write!(pts, " {img} {k}");
            }
            pts.push('\n');
        }
        (cams, imgs, pts)
    }
}

/// Parses the three files' contents and checks cross-file references.
pub fn parse_colmap_strings(cameras: &str, images: &str, points: &str) -> Result<SparseModel> {
    let model = SparseModel {
        cameras: parse_cameras(cameras)?,
        images: parse_images(images)?,
        points: parse_points(points)?,
    };
    model.validate()?;
    Ok(model)
}

/// Like [`parse_colmap_strings`] for raw bytes; invalid UTF-8 is a format
/// error.
pub fn parse_colmap_bytes(cameras: &[u8], images: &[u8], points: &[u8]) -> Result<SparseModel> {
    let text = |b: &[u8], name: &str| {
        std::str::from_utf8(b).map_err(|e| Error::Format(format!("{name} is not UTF-8: {e}"))).map(str::to_owned)
    };
    parse_colmap_strings(&text(cameras, "cameras.txt")?, &text(images, "images.txt")?, &text(points, "points3D.txt")?)
}

pub fn parse_colmap_text(dir: &Path) -> Result<SparseModel> {
    let read = |name: &str| {
        let p = dir.join(name);
        std::fs::read(&p).map_err(|e| Error::io(p, e))
    };
    parse_colmap_bytes(&read("cameras.txt")?, &read("images.txt")?, &read("points3D.txt")?)
}

pub fn write_colmap_text(model: &SparseModel, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (c, i, p) = model.to_strings();
    for (name, body) in [("cameras.txt", c), ("images.txt", i), ("points3D.txt", p)] {
        let path = dir.join(name);
        std::fs::write(&path, body).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
