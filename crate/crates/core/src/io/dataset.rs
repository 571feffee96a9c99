//! Dataset directories.
//!
//! ```text
//! meta.json          name, held-out views, known scales, optional backdrop
//! cameras.json       one camera per view
//! init.json          starting scene
//! reference.json     ground-truth scene (optional)
//! images/NNN.png
//! depth/NNN.pfm      exact depth (optional)
//! sparse/            COLMAP text model (optional)
//! pmaps/I_J.pmap     directed point-map records
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    parse_colmap_text, read_json, read_pfm, read_pmap, read_png, read_scene, write_colmap_text, write_json, write_pfm,
    write_pmap, write_png, write_scene, SceneFile, SparseModel,
};
use crate::buffer::{DepthMap, ImageBuffer};
use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::floater_lab::BackgroundPlane;
use crate::geometry::FeatureMatches;
use crate::scale_align::PointMapRecord;
use crate::scene::GaussianCloud;
use crate::synth::SynthDataset;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub name: String,
    #[serde(default)]
    pub holdout: Vec<usize>,
    /// Known `(i, j, s_ij)` scales of synthetic point maps.
    #[serde(default)]
    pub true_scales: Vec<(usize, usize, f64)>,
    #[serde(default)]
    pub backdrop: Option<BackgroundPlane>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetDir {
    pub meta: DatasetMeta,
    pub cameras: Vec<Camera>,
    pub images: Vec<ImageBuffer>,
    /// Empty, or one map per view.
    pub depths: Vec<DepthMap>,
    pub init: GaussianCloud,
    pub reference: Option<GaussianCloud>,
    pub sparse: Option<SparseModel>,
    pub records: Vec<PointMapRecord>,
}

pub fn image_name(v: usize) -> String {
    format!("{v:03}.png")
}

impl DatasetDir {
    pub fn validate(&self) -> Result<()> {
        let n = self.cameras.len();
        if self.images.len() != n {
            return Err(Error::Format(format!("{} images for {n} cameras", self.images.len())));
        }
        if !self.depths.is_empty() && self.depths.len() != n {
            return Err(Error::Format(format!("{} depth maps for {n} cameras", self.depths.len())));
        }
        for (v, cam) in self.cameras.iter().enumerate() {
            cam.validate()?;
            self.images[v].ensure_dims(cam.width, cam.height)?;
            if let Some(d) = self.depths.get(v) {
                d.ensure_dims(cam.width, cam.height)?;
            }
        }
        if let Some(v) = self.meta.holdout.iter().find(|v| **v >= n) {
            return Err(Error::Format(format!("held-out view {v} out of range")));
        }
        for r in &self.records {
            if r.i >= n || r.j >= n {
                return Err(Error::Format(format!("point map ({}, {}) references a missing view", r.i, r.j)));
            }
            self.records_dims(r)?;
        }
        self.init.validate()
    }

    fn records_dims(&self, r: &PointMapRecord) -> Result<()> {
        r.validate()?;
        let cam = &self.cameras[r.i];
        r.x11.ensure_dims(cam.width, cam.height)
    }

    pub fn train_views(&self) -> Vec<usize> {
        (0..self.cameras.len()).filter(|v| !self.meta.holdout.contains(v)).collect()
    }

    /// Feature matches from the sparse model, or an empty set per view.
    pub fn matches(&self) -> FeatureMatches {
        match &self.sparse {
            Some(m) if m.images.len() == self.cameras.len() => m.to_matches(),
            _ => FeatureMatches::new(self.cameras.len()),
        }
    }

    pub fn true_scales(&self) -> BTreeMap<(usize, usize), f64> {
        self.meta.true_scales.iter().map(|&(i, j, s)| ((i, j), s)).collect()
    }

    pub fn from_synth(ds: &SynthDataset) -> Result<Self> {
        let names: Vec<String> = (0..ds.cameras.len()).map(image_name).collect();
        let sparse = if ds.tracks.is_empty() {
            None
        } else {
            Some(SparseModel::from_views(&ds.cameras, &names, &ds.matches, &ds.tracks)?)
        };
        Ok(DatasetDir {
            meta: DatasetMeta {
                name: ds.name.clone(),
                holdout: ds.holdout.clone(),
                true_scales: ds.true_scales.iter().map(|(&(i, j), &s)| (i, j, s)).collect(),
                backdrop: ds.backdrop,
            },
            cameras: ds.cameras.clone(),
            images: ds.images.clone(),
            depths: ds.depths.clone(),
            init: ds.init.clone(),
            reference: (!ds.reference.is_empty()).then(|| ds.reference.clone()),
            sparse,
            records: ds.records.clone(),
        })
    }
}

pub fn write_dataset(dir: &Path, ds: &DatasetDir) -> Result<()> {
    ds.validate()?;
    write_json(&dir.join("meta.json"), &ds.meta)?;
    write_json(&dir.join("cameras.json"), &ds.cameras)?;
    write_scene(
        &dir.join("init.json"),
        &SceneFile {
            gaussians: ds.init.clone(),
            cameras: Vec::new(),
        },
    )?;
    if let Some(r) = &ds.reference {
        write_scene(
            &dir.join("reference.json"),
            &SceneFile {
                gaussians: r.clone(),
                cameras: Vec::new(),
            },
        )?;
    }
    for (v, img) in ds.images.iter().enumerate() {
        write_png(&dir.join("images").join(image_name(v)), img)?;
    }
    for (v, d) in ds.depths.iter().enumerate() {
        write_pfm(&dir.join("depth").join(format!("{v:03}.pfm")), d)?;
    }
    if let Some(m) = &ds.sparse {
        write_colmap_text(m, &dir.join("sparse"))?;
    }
    for r in &ds.records {
        write_pmap(&dir.join("pmaps").join(format!("{}_{}.pmap", r.i, r.j)), r)?;
    }
    Ok(())
}

/// Point-map records in `dir`, sorted by `(i, j)`.
pub fn read_pmap_dir(dir: &Path) -> Result<Vec<PointMapRecord>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "pmap") {
            out.push(read_pmap(&path)?);
        }
    }
    out.sort_by_key(|r| (r.i, r.j));
    Ok(out)
}

pub fn load_dataset(dir: &Path) -> Result<DatasetDir> {
    let meta: DatasetMeta = read_json(&dir.join("meta.json"))?;
    let cameras: Vec<Camera> = read_json(&dir.join("cameras.json"))?;
    let init = read_scene(&dir.join("init.json"))?.gaussians;
    let reference_path = dir.join("reference.json");
    let reference = if reference_path.exists() {
        Some(read_scene(&reference_path)?.gaussians)
    } else {
        None
    };
    let images = (0..cameras.len())
        .map(|v| read_png(&dir.join("images").join(image_name(v))))
        .collect::<Result<Vec<_>>>()?;
    let depth_dir = dir.join("depth");
    let depths = if depth_dir.exists() {
        (0..cameras.len())
            .map(|v| read_pfm(&depth_dir.join(format!("{v:03}.pfm"))))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    let sparse_dir = dir.join("sparse");
    let sparse = if sparse_dir.exists() {
        Some(parse_colmap_text(&sparse_dir)?)
    } else {
        None
    };
    let pmap_dir = dir.join("pmaps");
    let records = if pmap_dir.exists() {
        read_pmap_dir(&pmap_dir)?
    } else {
        Vec::new()
    };
    let ds = DatasetDir {
        meta,
        cameras,
        images,
        depths,
        init,
        reference,
        sparse,
        records,
    };
    ds.validate()?;
    Ok(ds)
}
