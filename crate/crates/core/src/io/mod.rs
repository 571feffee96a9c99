//! File formats: COLMAP text models, point-map containers, PFM/PNG images,
//! scene JSON and dataset directories.

mod colmap;
mod dataset;

pub use colmap::{
    parse_colmap_bytes, parse_colmap_strings, parse_colmap_text, write_colmap_text, CameraModel, ColmapCamera,
    ColmapImage, ColmapPoint, Keypoint, SparseModel,
};
pub use dataset::{image_name, load_dataset, read_pmap_dir, write_dataset, DatasetDir, DatasetMeta};

use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::buffer::{DepthMap, Grid, ImageBuffer};
use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::scale_align::PointMapRecord;
use crate::scene::GaussianCloud;

pub const PMAP_MAGIC: &[u8; 5] = b"PMAP1";
/// Depth units per PNG16 step: stored value = round(depth * scale).
pub const DEPTH_PNG_SCALE: f64 = 1000.0;

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Point-map container: magic, `i j H W` as little-endian `u32`, then
/// `X11` (H*W*3 f32), `C11` (H*W f32), `X21`, `C21`.
pub fn encode_pmap(r: &PointMapRecord) -> Result<Vec<u8>> {
    r.x11.ensure_same(&r.c11)?;
    r.x11.ensure_same(&r.x21)?;
    r.x11.ensure_same(&r.c21)?;
    let (w, h) = r.x11.dims();
    let to_u32 = |v: usize, what: &str| u32::try_from(v).map_err(|_| Error::Format(format!("{what} {v} exceeds u32")));
    let mut out = Vec::with_capacity(5 + 16 + w * h * 32);
    out.extend_from_slice(PMAP_MAGIC);
    for (v, what) in [(r.i, "view index"), (r.j, "view index"), (h, "height"), (w, "width")] {
        out.extend_from_slice(&to_u32(v, what)?.to_le_bytes());
    }
    let points = |out: &mut Vec<u8>, g: &Grid<Vector3<f64>>| {
        for p in g.as_slice() {
            for v in p.iter() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
    };
    let scalars = |out: &mut Vec<u8>, g: &Grid<f64>| {
        for v in g.as_slice() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    };
    points(&mut out, &r.x11);
    scalars(&mut out, &r.c11);
    points(&mut out, &r.x21);
    scalars(&mut out, &r.c21);
    Ok(out)
}

pub fn decode_pmap(bytes: &[u8]) -> Result<PointMapRecord> {
    let bad = |m: String| Error::Format(format!("pmap: {m}"));
    if bytes.len() < 5 || &bytes[..5] != PMAP_MAGIC {
        return Err(bad("bad magic".into()));
    }
    if bytes.len() < 21 {
        return Err(bad("truncated header".into()));
    }
    let word = |k: usize| u32::from_le_bytes(bytes[5 + 4 * k..9 + 4 * k].try_into().expect("4 bytes")) as usize;
    let (i, j, h, w) = (word(0), word(1), word(2), word(3));
    if w == 0 || h == 0 {
        return Err(bad(format!("empty {w}x{h} map")));
    }
    let n = w.checked_mul(h).ok_or_else(|| bad("size overflow".into()))?;
    let payload = n.checked_mul(32).ok_or_else(|| bad("size overflow".into()))?;
    if bytes.len() - 21 != payload {
        return Err(bad(format!("payload is {} bytes, expected {payload}", bytes.len() - 21)));
    }
    let mut pos = 21;
    let mut next = || {
        let v = f32::from_le_bytes(bytes[pos..pos + 4].try_into().expect("4 bytes"));
        pos += 4;
        v as f64
    };
    let mut points = || -> Vec<Vector3<f64>> { (0..n).map(|_| Vector3::new(next(), next(), next())).collect() };
    let x11 = points();
    let c11: Vec<f64> = (0..n).map(|_| next()).collect();
    let x21: Vec<Vector3<f64>> = (0..n).map(|_| Vector3::new(next(), next(), next())).collect();
    let c21: Vec<f64> = (0..n).map(|_| next()).collect();
    Ok(PointMapRecord {
        i,
        j,
        x11: Grid::from_vec(w, h, x11)?,
        c11: Grid::from_vec(w, h, c11)?,
        x21: Grid::from_vec(w, h, x21)?,
        c21: Grid::from_vec(w, h, c21)?,
    })
}

pub fn write_pmap(path: &Path, r: &PointMapRecord) -> Result<()> {
    write_file(path, &encode_pmap(r)?)
}

pub fn read_pmap(path: &Path) -> Result<PointMapRecord> {
    decode_pmap(&read_file(path)?)
}

/// Grayscale PFM (`Pf`, little-endian, rows stored bottom to top).
pub fn encode_pfm(depth: &DepthMap) -> Vec<u8> {
    let (w, h) = depth.dims();
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    for y in (0..h).rev() {
        for x in 0..w {
            out.extend_from_slice(&(*depth.get(x, y) as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_pfm(bytes: &[u8]) -> Result<DepthMap> {
    let bad = |m: &str| Error::Format(format!("pfm: {m}"));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not text"))?);
    }
    pos += 1;
    if fields[0] != "Pf" {
        return Err(bad("only grayscale `Pf` files are supported"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    let scale: f64 = fields[3].parse().map_err(|_| bad("bad scale"))?;
    if w == 0 || h == 0 || scale == 0.0 || !scale.is_finite() {
        return Err(bad("invalid header values"));
    }
    let n = w.checked_mul(h).ok_or_else(|| bad("size overflow"))?;
    let data = bytes.get(pos..).unwrap_or(&[]);
    if data.len() != n.checked_mul(4).ok_or_else(|| bad("size overflow"))? {
        return Err(bad("payload size does not match header"));
    }
    let little = scale < 0.0;
    let mut out = DepthMap::new(w, h);
    for (k, c) in data.chunks_exact(4).enumerate() {
        let b: [u8; 4] = c.try_into().expect("4 bytes");
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        out.set(k % w, h - 1 - k / w, v as f64);
    }
    Ok(out)
}

pub fn write_pfm(path: &Path, depth: &DepthMap) -> Result<()> {
    write_file(path, &encode_pfm(depth))
}

pub fn read_pfm(path: &Path) -> Result<DepthMap> {
    decode_pfm(&read_file(path)?)
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// 8-bit RGB PNG; values are clamped to [0, 1].
pub fn write_png(path: &Path, img: &ImageBuffer) -> Result<()> {
    let (w, h) = img.dims();
    let buf = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let c = img.get(x as usize, y as usize);
        image::Rgb([to_u8(c.x), to_u8(c.y), to_u8(c.z)])
    });
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    buf.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn read_png(path: &Path) -> Result<ImageBuffer> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(ImageBuffer::from_fn(w, h, |x, y| {
        let p = img.get_pixel(x as u32, y as u32).0;
        Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64) / 255.0
    }))
}

/// Grayscale heat map of `values` normalized by their maximum magnitude.
pub fn write_heatmap_png(path: &Path, values: &Grid<f64>) -> Result<()> {
    let m = values.as_slice().iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let img = values.map(|v| Vector3::repeat(if m > 0.0 { v.abs() / m } else { 0.0 }));
    write_png(path, &img)
}

/// 16-bit grayscale PNG with `round(depth * DEPTH_PNG_SCALE)`.
pub fn write_depth_png16(path: &Path, depth: &DepthMap) -> Result<()> {
    let (w, h) = depth.dims();
    let buf: image::ImageBuffer<image::Luma<u16>, Vec<u16>> = image::ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let d = *depth.get(x as usize, y as usize);
        image::Luma([(d * DEPTH_PNG_SCALE).round().clamp(0.0, u16::MAX as f64) as u16])
    });
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    buf.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Scene file: all Gaussians and all cameras in one JSON object.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SceneFile {
    pub gaussians: GaussianCloud,
    #[serde(default)]
    pub cameras: Vec<Camera>,
}

impl SceneFile {
    pub fn validate(&self) -> Result<()> {
        self.gaussians.validate()?;
        self.cameras.iter().try_for_each(Camera::validate)
    }
}

pub fn write_scene(path: &Path, scene: &SceneFile) -> Result<()> {
    write_file(path, serde_json::to_string_pretty(scene)?.as_bytes())
}

pub fn read_scene(path: &Path) -> Result<SceneFile> {
    let s: SceneFile = serde_json::from_slice(&read_file(path)?)?;
    s.validate()?;
    Ok(s)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_file(path, serde_json::to_string_pretty(value)?.as_bytes())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&read_file(path)?)?)
}
