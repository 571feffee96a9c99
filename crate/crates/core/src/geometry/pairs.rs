//! Training pair selection from co-visible sparse tracks.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use super::homography::{ransac_homography, RANSAC_ITERATIONS, RANSAC_SEED, RANSAC_THRESHOLD_PX};
use crate::camera::Camera;
use crate::error::{Error, Result};

pub const MIN_COVISIBLE: usize = 30;
pub const MIN_ROTATION_DEG: f64 = 16.0;
pub const MAX_ROTATION_DEG: f64 = 60.0;
pub const MAX_HOMOGRAPHY_INLIERS: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewPair {
    pub i: usize,
    pub j: usize,
    pub n_covisible: usize,
    pub rel_rotation_deg: f64,
    pub homography_inlier_frac: f64,
}

/// Observed sparse tracks per view: track id to pixel.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureMatches {
    pub views: Vec<BTreeMap<u64, Vector2<f64>>>,
}

impl FeatureMatches {
    pub fn new(num_views: usize) -> Self {
        FeatureMatches {
            views: vec![BTreeMap::new(); num_views],
        }
    }

    pub fn observe(&mut self, view: usize, track: u64, pixel: Vector2<f64>) {
        self.views[view].insert(track, pixel);
    }

    /// Pixel correspondences of the tracks shared by two views, in track-id order.
    pub fn correspondences(&self, i: usize, j: usize) -> (Vec<Vector2<f64>>, Vec<Vector2<f64>>) {
        let (a, b) = (&self.views[i], &self.views[j]);
        a.iter()
            .filter_map(|(t, p)| b.get(t).map(|q| (*p, *q)))
            .unzip()
    }

    pub fn shared_tracks(&self, i: usize, j: usize) -> usize {
        let (a, b) = (&self.views[i], &self.views[j]);
        a.keys().filter(|t| b.contains_key(t)).count()
    }

    pub fn validate(&self, cams: &[Camera]) -> Result<()> {
        if self.views.len() != cams.len() {
            return Err(Error::InvalidParameter(format!(
                "{} views of matches for {} cameras",
                self.views.len(),
                cams.len()
            )));
        }
        for (v, (obs, cam)) in self.views.iter().zip(cams).enumerate() {
            if let Some((t, _)) = obs.iter().find(|(_, p)| !cam.contains(p)) {
                return Err(Error::InvalidParameter(format!(
                    "track {t} lies outside view {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Metrics of every candidate pair, whether or not it passes.
pub fn evaluate_pair(matches: &FeatureMatches, cams: &[Camera], i: usize, j: usize) -> ViewPair {
    let (src, dst) = matches.correspondences(i, j);
    let homography_inlier_frac =
        ransac_homography(&src, &dst, RANSAC_ITERATIONS, RANSAC_THRESHOLD_PX, RANSAC_SEED)
            .map_or(1.0, |f| f.inlier_fraction());
    ViewPair {
        i,
        j,
        n_covisible: src.len(),
        rel_rotation_deg: cams[i].relative_rotation_deg(&cams[j]),
        homography_inlier_frac,
    }
}

pub fn passes(p: &ViewPair) -> bool {
    p.n_covisible > MIN_COVISIBLE
        && (MIN_ROTATION_DEG..=MAX_ROTATION_DEG).contains(&p.rel_rotation_deg)
        && p.homography_inlier_frac < MAX_HOMOGRAPHY_INLIERS
}

/// All pairs `i < j` meeting the co-visibility, rotation and non-planarity
/// criteria. The homography is only fit when the first two pass.
pub fn select_pairs(matches: &FeatureMatches, cams: &[Camera]) -> Result<Vec<ViewPair>> {
    matches.validate(cams)?;
    let mut out = Vec::new();
    for i in 0..cams.len() {
        for j in i + 1..cams.len() {
            let n = matches.shared_tracks(i, j);
            let theta = cams[i].relative_rotation_deg(&cams[j]);
            if n <= MIN_COVISIBLE || !(MIN_ROTATION_DEG..=MAX_ROTATION_DEG).contains(&theta) {
                continue;
            }
            let p = evaluate_pair(matches, cams, i, j);
            if passes(&p) {
                out.push(p);
            }
        }
    }
    Ok(out)
}

/// Whitespace-separated audit table with a header line.
pub fn pairs_to_table(pairs: &[ViewPair]) -> String {
    let mut s = String::from("# i j n_covisible angle_deg inlier_frac\n");
    for p in pairs {
        let _ = writeln!(
            s,
            "{} {} {} {:.6} {:.6}",
            p.i, p.j, p.n_covisible, p.rel_rotation_deg, p.homography_inlier_frac
        );
    }
    s
}

pub fn pairs_from_table(text: &str) -> Result<Vec<ViewPair>> {
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        let err = |m: &str| Error::Parse {
            file: "pairs".into(),
            line: ln + 1,
            message: m.into(),
        };
        if f.len() != 5 {
            return Err(err("expected 5 fields"));
        }
        out.push(ViewPair {
            i: f[0].parse().map_err(|_| err("bad i"))?,
            j: f[1].parse().map_err(|_| err("bad j"))?,
            n_covisible: f[2].parse().map_err(|_| err("bad n_covisible"))?,
            rel_rotation_deg: f[3].parse().map_err(|_| err("bad angle"))?,
            homography_inlier_frac: f[4].parse().map_err(|_| err("bad inlier fraction"))?,
        });
    }
    Ok(out)
}
