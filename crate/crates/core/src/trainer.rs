//! Training loop: two-path color loss, depth consistency and depth prior on
//! the geometric path, Adam over logistic/log parameterized Gaussians.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::buffer::{DepthMap, ImageBuffer};
use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::floater_lab::BackgroundPlane;
use crate::geometry::{consis_loss_with, prior_loss, select_pairs, FeatureMatches, PairPrior};
use crate::io::{write_file, write_scene, DatasetDir, SceneFile};
use crate::optim::{exponential_lr, logit, sigmoid, Adam, AdamConfig};
use crate::photometric::{color_loss_images, psnr, ColorLossWeights};
use crate::render::{render_backward_with, render_with, Backdrop, CloudGrad, RenderOutput, RenderPath, RenderSettings};
use crate::scale_align::{solve_scales, PointMapRecord, SolverConfig};
use crate::scene::{normalize_quat, Gaussian, GaussianCloud};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lambda_geo: f64,
    pub lambda_consis: f64,
    pub lambda_prior: f64,
    pub lambda_dssim: f64,
    pub lambda_s: f64,
    /// Position learning rates, multiplied by the camera extent.
    pub lr_position_init: f64,
    pub lr_position_final: f64,
    pub lr_color: f64,
    pub lr_opacity: f64,
    pub lr_alpha_aux: f64,
    pub lr_scale: f64,
    pub lr_rotation: f64,
    pub seed: u64,
    /// Iteration at which the geometric losses switch on.
    pub geometry_warmup: usize,
    /// Geometric-path depth is treated as empty where accumulated alpha is
    /// below this.
    pub depth_min_alpha: f64,
    /// Relative tolerance beyond which a warped point counts as hidden in
    /// the other view and is left out of the consistency term.
    pub occlusion_tol: Option<f64>,
    pub checkpoint_every: usize,
    pub freeze_alpha_aux: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 30_000,
            lambda_geo: 1.0,
            lambda_consis: 0.05,
            lambda_prior: 0.005,
            lambda_dssim: 0.2,
            lambda_s: 0.1,
            lr_position_init: 1.6e-4,
            lr_position_final: 1.6e-6,
            lr_color: 0.0025,
            lr_opacity: 0.05,
            lr_alpha_aux: 0.05,
            lr_scale: 0.005,
            lr_rotation: 0.001,
            seed: 0,
            geometry_warmup: 500,
            depth_min_alpha: 0.9,
            occlusion_tol: Some(0.03),
            checkpoint_every: 0,
            freeze_alpha_aux: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [
            ("lambda_geo", self.lambda_geo),
            ("lambda_consis", self.lambda_consis),
            ("lambda_prior", self.lambda_prior),
            ("lambda_s", self.lambda_s),
        ];
        if let Some((k, v)) = weights.iter().find(|(_, v)| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::Config(format!("{k} must be a finite non-negative number, got {v}")));
        }
        if !(0.0..=1.0).contains(&self.lambda_dssim) {
            return Err(Error::Config(format!("lambda_dssim must lie in [0, 1], got {}", self.lambda_dssim)));
        }
        let lrs = [
            self.lr_position_init,
            self.lr_position_final,
            self.lr_color,
            self.lr_opacity,
            self.lr_alpha_aux,
            self.lr_scale,
            self.lr_rotation,
        ];
        if lrs.iter().any(|v| !(*v >= 0.0 && v.is_finite())) || self.lr_position_init == 0.0 && self.lr_position_final > 0.0 {
            return Err(Error::Config("learning rates must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn color_weights(&self) -> ColorLossWeights {
        ColorLossWeights {
            lambda_dssim: self.lambda_dssim,
            lambda_s: self.lambda_s,
        }
    }

    fn geometry_on(&self, it: usize) -> bool {
        self.lambda_geo > 0.0 && it >= self.geometry_warmup
    }

    /// JSON object, or `key = value` lines with `#` comments.
    pub fn from_text(text: &str) -> Result<Self> {
        let cfg: TrainConfig = if text.trim_start().starts_with('{') {
            serde_json::from_str(text)?
        } else {
            let mut map = serde_json::Map::new();
            for (n, line) in text.lines().enumerate() {
                let line = line.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                    file: "config".into(),
                    line: n + 1,
                    message: format!("expected key = value, got `{line}`"),
                })?;
                let v = v.trim();
                let value = serde_json::from_str(v).unwrap_or_else(|_| serde_json::Value::String(v.to_string()));
                map.insert(k.trim().to_string(), value);
            }
            serde_json::from_value(serde_json::Value::Object(map)).map_err(|e| Error::Config(e.to_string()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Everything the loop reads besides the scene.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub cameras: Vec<Camera>,
    pub images: Vec<ImageBuffer>,
    pub train_views: Vec<usize>,
    /// Consistency pairs.
    pub pairs: Vec<(usize, usize)>,
    pub priors: Vec<PairPrior>,
    pub backdrops: Option<Vec<Backdrop>>,
}

impl TrainData {
    pub fn new(cameras: Vec<Camera>, images: Vec<ImageBuffer>, train_views: Vec<usize>) -> Result<Self> {
        if cameras.len() != images.len() {
            return Err(Error::InvalidParameter(format!("{} cameras but {} images", cameras.len(), images.len())));
        }
        for (c, img) in cameras.iter().zip(&images) {
            img.ensure_dims(c.width, c.height)?;
        }
        if train_views.is_empty() || train_views.iter().any(|v| *v >= cameras.len()) {
            return Err(Error::InvalidParameter("training views must be non-empty and in range".into()));
        }
        Ok(TrainData {
            cameras,
            images,
            train_views,
            pairs: Vec::new(),
            priors: Vec::new(),
            backdrops: None,
        })
    }

    pub fn with_backdrop(mut self, plane: &BackgroundPlane) -> Self {
        self.backdrops = Some(self.cameras.iter().map(|c| plane.backdrop(c)).collect());
        self
    }

    fn backdrop(&self, v: usize) -> Option<&Backdrop> {
        self.backdrops.as_ref().map(|b| &b[v])
    }

    /// Training views, consistency pairs from the sparse matches and
    /// metric depth priors from the solved point-map scales.
    pub fn from_dataset(ds: &DatasetDir, solver: &SolverConfig) -> Result<Self> {
        let train = ds.train_views();
        let mut data = TrainData::new(ds.cameras.clone(), ds.images.clone(), train.clone())?;
        if let Some(p) = &ds.meta.backdrop {
            data = data.with_backdrop(p);
        }
        let matches = ds.matches();
        data.pairs = train_pairs(&matches, &ds.cameras, &train)?;
        let records: Vec<PointMapRecord> = ds
            .records
            .iter()
            .filter(|r| train.contains(&r.i) && train.contains(&r.j))
            .cloned()
            .collect();
        if !records.is_empty() {
            let poses: Vec<_> = ds.cameras.iter().map(|c| c.cam_to_world()).collect();
            let sol = solve_scales(&records, &poses, solver)?;
            let mut priors = sol.priors(&records);
            let points: BTreeMap<u64, nalgebra::Vector3<f64>> = ds
                .sparse
                .as_ref()
                .map(|m| m.points.iter().map(|(k, p)| (*k, p.xyz)).collect())
                .unwrap_or_default();
            match metric_gauge(&priors, &ds.cameras, &matches, &points) {
                Some(g) => {
                    log::info!("metric gauge of the depth priors: {g:.6}");
                    for p in &mut priors {
                        p.depth = p.depth.map(|d| d * g);
                    }
                }
                None => log::warn!("no sparse tracks fall on the priors; using them without a metric gauge"),
            }
            data.priors = priors;
        }
        Ok(data)
    }
}

/// Selected pairs among `train`, as indices into the full view list.
pub fn train_pairs(matches: &FeatureMatches, cameras: &[Camera], train: &[usize]) -> Result<Vec<(usize, usize)>> {
    let cams: Vec<Camera> = train.iter().map(|&v| cameras[v].clone()).collect();
    let sub = FeatureMatches {
        views: train.iter().map(|&v| matches.views.get(v).cloned().unwrap_or_default()).collect(),
    };
    Ok(select_pairs(&sub, &cams)?.iter().map(|p| (train[p.i], train[p.j])).collect())
}

/// Median ratio of sparse track depth to prior depth at the observed pixel,
/// over all priors. The solved scales are only fixed up to one global
/// factor; this pins it to the sparse reconstruction.
pub fn metric_gauge(
    priors: &[PairPrior],
    cameras: &[Camera],
    matches: &FeatureMatches,
    points: &BTreeMap<u64, nalgebra::Vector3<f64>>,
) -> Option<f64> {
    let mut ratios = Vec::new();
    for p in priors {
        let cam = &cameras[p.view];
        let Some(obs) = matches.views.get(p.view) else { continue };
        for (t, px) in obs {
            let Some(x) = points.get(t) else { continue };
            let z = cam.to_camera(x).z;
            let (u, v) = (px.x.round(), px.y.round());
            if z <= 0.0 || u < 0.0 || v < 0.0 || u as usize >= cam.width || v as usize >= cam.height {
                continue;
            }
            let d = *p.depth.get(u as usize, v as usize);
            if d > 0.0 {
                ratios.push(z / d);
            }
        }
    }
    if ratios.is_empty() {
        return None;
    }
    ratios.sort_by(f64::total_cmp);
    Some(ratios[ratios.len() / 2])
}

/// One training view, optionally one consistency pair and one prior index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Batch {
    pub view: usize,
    pub pair: Option<(usize, usize)>,
    pub prior: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub color: f64,
    pub consis: f64,
    pub prior: f64,
    pub psnr: f64,
    pub grad: CloudGrad,
}

/// Geometric-path depth with pixels below `min_alpha` coverage set to 0.
pub fn masked_depth(out: &RenderOutput, min_alpha: f64) -> DepthMap {
    let mut d = out.depth.clone();
    for (z, a) in d.as_mut_slice().iter_mut().zip(out.accum_alpha.as_slice()) {
        if *a < min_alpha {
            *z = 0.0;
        }
    }
    d
}

struct GeometryTerms {
    consis: f64,
    prior: f64,
    /// Weighted depth gradients per view.
    depth_grads: BTreeMap<usize, DepthMap>,
}

fn geometry_terms(
    renders: &mut BTreeMap<usize, RenderOutput>,
    cloud: &GaussianCloud,
    data: &TrainData,
    batch: &Batch,
    cfg: &TrainConfig,
    settings: &RenderSettings,
) -> Result<GeometryTerms> {
    let mut geo = |v: usize| -> DepthMap {
        let out = renders
            .entry(v)
            .or_insert_with(|| render_with(cloud, &data.cameras[v], RenderPath::Geometric, settings, data.backdrop(v)));
        masked_depth(out, cfg.depth_min_alpha)
    };
    let mut out = GeometryTerms {
        consis: 0.0,
        prior: 0.0,
        depth_grads: BTreeMap::new(),
    };
    let add = |grads: &mut BTreeMap<usize, DepthMap>, v: usize, g: &DepthMap, k: f64| {
        let cam = &data.cameras[v];
        let acc = grads.entry(v).or_insert_with(|| DepthMap::new(cam.width, cam.height));
        for (a, b) in acc.as_mut_slice().iter_mut().zip(g.as_slice()) {
            *a += k * b;
        }
    };
    if let Some((i, j)) = batch.pair {
        let (di, dj) = (geo(i), geo(j));
        let c = consis_loss_with(&di, &dj, &data.cameras[i], &data.cameras[j], cfg.occlusion_tol)?;
        let k = cfg.lambda_geo * cfg.lambda_consis;
        add(&mut out.depth_grads, i, &c.grad_i, k);
        add(&mut out.depth_grads, j, &c.grad_j, k);
        out.consis = c.value;
    }
    if let Some(p) = batch.prior {
        let prior = data
            .priors
            .get(p)
            .ok_or_else(|| Error::InvalidParameter(format!("prior index {p} out of range")))?;
        let d = geo(prior.view);
        let l = prior_loss(&d, prior)?;
        add(&mut out.depth_grads, prior.view, &l.grad, cfg.lambda_geo * cfg.lambda_prior);
        out.prior = l.value;
    }
    Ok(out)
}

/// Gradient of the geometric losses alone.
pub fn geometry_gradient(
    cloud: &GaussianCloud,
    data: &TrainData,
    batch: &Batch,
    cfg: &TrainConfig,
    settings: &RenderSettings,
) -> Result<CloudGrad> {
    let mut renders = BTreeMap::new();
    let terms = geometry_terms(&mut renders, cloud, data, batch, cfg, settings)?;
    let mut grad = CloudGrad::zeros(cloud.len());
    for (v, gd) in &terms.depth_grads {
        let cam = &data.cameras[*v];
        let g = render_backward_with(
            cloud,
            cam,
            RenderPath::Geometric,
            settings,
            data.backdrop(*v),
            &ImageBuffer::new(cam.width, cam.height),
            gd,
        )?;
        grad.add_scaled(&g, 1.0);
    }
    Ok(grad)
}

/// `L_color + lambda_geo * (lambda_consis * L_consis + lambda_prior * L_prior)`
/// and its gradient with respect to every Gaussian parameter.
pub fn total_loss(
    cloud: &GaussianCloud,
    data: &TrainData,
    batch: &Batch,
    cfg: &TrainConfig,
    settings: &RenderSettings,
) -> Result<LossBreakdown> {
    let v = batch.view;
    let cam = &data.cameras[v];
    let gt = &data.images[v];
    let bd = data.backdrop(v);
    let out_o = render_with(cloud, cam, RenderPath::Appearance, settings, bd);
    let mut renders = BTreeMap::new();
    renders.insert(v, render_with(cloud, cam, RenderPath::Geometric, settings, bd));
    let cl = color_loss_images(&out_o.color, &renders[&v].color, gt, &cfg.color_weights())?;
    let terms = geometry_terms(&mut renders, cloud, data, batch, cfg, settings)?;

    let zero_depth = DepthMap::new(cam.width, cam.height);
    let mut grad = render_backward_with(cloud, cam, RenderPath::Appearance, settings, bd, &cl.grad_appearance, &zero_depth)?;
    let g = render_backward_with(
        cloud,
        cam,
        RenderPath::Geometric,
        settings,
        bd,
        &cl.grad_geometric,
        terms.depth_grads.get(&v).unwrap_or(&zero_depth),
    )?;
    grad.add_scaled(&g, 1.0);
    for (u, gd) in terms.depth_grads.iter().filter(|(u, _)| **u != v) {
        let c = &data.cameras[*u];
        let g = render_backward_with(
            cloud,
            c,
            RenderPath::Geometric,
            settings,
            data.backdrop(*u),
            &ImageBuffer::new(c.width, c.height),
            gd,
        )?;
        grad.add_scaled(&g, 1.0);
    }
    let total = cl.total + cfg.lambda_geo * (cfg.lambda_consis * terms.consis + cfg.lambda_prior * terms.prior);
    Ok(LossBreakdown {
        total,
        color: cl.total,
        consis: terms.consis,
        prior: terms.prior,
        psnr: psnr(&out_o.color, gt)?,
        grad,
    })
}

/// Unconstrained parameters: logits of both opacities, log scales and raw
/// colors, centers and quaternions.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    pub mu: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_aux: Vec<f64>,
    pub color: Vec<f64>,
    pub scale: Vec<f64>,
    pub rot: Vec<f64>,
    frozen_aux: Option<Vec<f64>>,
}

impl ParamStore {
    pub fn from_cloud(cloud: &GaussianCloud, freeze_alpha_aux: bool) -> Self {
        let mut p = ParamStore {
            mu: Vec::new(),
            alpha: Vec::new(),
            alpha_aux: Vec::new(),
            color: Vec::new(),
            scale: Vec::new(),
            rot: Vec::new(),
            frozen_aux: freeze_alpha_aux.then(|| cloud.iter().map(|g| g.alpha_aux).collect()),
        };
        for g in cloud.iter() {
            p.mu.extend(g.mu.iter());
            p.alpha.push(logit(g.alpha));
            p.alpha_aux.push(logit(g.alpha_aux));
            p.color.extend(g.color.iter());
            p.scale.extend(g.scale.iter().map(|s| s.ln()));
            p.rot.extend(g.rot.iter());
        }
        p
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    pub fn to_cloud(&self) -> GaussianCloud {
        let v3 = |v: &[f64], k: usize| nalgebra::Vector3::new(v[3 * k], v[3 * k + 1], v[3 * k + 2]);
        GaussianCloud::new(
            (0..self.len())
                .map(|k| Gaussian {
                    mu: v3(&self.mu, k),
                    alpha: sigmoid(self.alpha[k]),
                    alpha_aux: match &self.frozen_aux {
                        Some(a) => a[k],
                        None => sigmoid(self.alpha_aux[k]),
                    },
                    color: v3(&self.color, k),
                    scale: v3(&self.scale, k).map(f64::exp),
                    rot: [self.rot[4 * k], self.rot[4 * k + 1], self.rot[4 * k + 2], self.rot[4 * k + 3]],
                })
                .collect(),
        )
    }
}

/// Gradients mapped onto [`ParamStore`] coordinates.
fn chain_grads(params: &ParamStore, grad: &CloudGrad) -> [Vec<f64>; 6] {
    let n = params.len();
    let mut out = [
        Vec::with_capacity(3 * n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(3 * n),
        Vec::with_capacity(3 * n),
        Vec::with_capacity(4 * n),
    ];
    for (k, g) in grad.grads.iter().enumerate() {
        out[0].extend(g.mu.iter());
        let a = sigmoid(params.alpha[k]);
        out[1].push(g.alpha * a * (1.0 - a));
        let b = sigmoid(params.alpha_aux[k]);
        out[2].push(g.alpha_aux * b * (1.0 - b));
        out[3].extend(g.color.iter());
        for c in 0..3 {
            out[4].push(g.scale[c] * params.scale[3 * k + c].exp());
        }
        out[5].extend(g.rot.iter());
    }
    out
}

/// Optimizer state: one Adam per parameter group.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ParamStore,
    adams: Vec<Adam>,
    pub iteration: usize,
    /// Camera extent multiplying the position learning rate.
    pub extent: f64,
}

impl TrainState {
    pub fn new(cloud: &GaussianCloud, cfg: &TrainConfig, extent: f64) -> Self {
        let params = ParamStore::from_cloud(cloud, cfg.freeze_alpha_aux);
        let ac = AdamConfig::default();
        let n = params.len();
        TrainState {
            adams: [3 * n, n, n, 3 * n, 3 * n, 4 * n].iter().map(|&l| Adam::new(l, ac)).collect(),
            params,
            iteration: 0,
            extent,
        }
    }

    pub fn cloud(&self) -> GaussianCloud {
        self.params.to_cloud()
    }
}

/// 1.1 times the largest distance of a camera center from their mean.
pub fn camera_extent(cameras: &[Camera]) -> f64 {
    if cameras.is_empty() {
        return 1.0;
    }
    let c: Vec<_> = cameras.iter().map(Camera::center).collect();
    let mean = c.iter().sum::<nalgebra::Vector3<f64>>() / c.len() as f64;
    let r = c.iter().map(|p| (p - mean).norm()).fold(0.0, f64::max);
    if r > 0.0 {
        1.1 * r
    } else {
        1.0
    }
}

/// One Adam update. Returns `false` and leaves the state untouched when the
/// gradient has a non-finite entry.
pub fn step(state: &mut TrainState, grad: &CloudGrad, cfg: &TrainConfig) -> Result<bool> {
    if grad.len() != state.params.len() {
        return Err(Error::InvalidParameter(format!(
            "gradient for {} Gaussians, state has {}",
            grad.len(),
            state.params.len()
        )));
    }
    if !grad.is_finite() {
        log::warn!("iteration {}: non-finite gradient, step skipped", state.iteration);
        state.iteration += 1;
        return Ok(false);
    }
    let g = chain_grads(&state.params, grad);
    let lr_pos = exponential_lr(cfg.lr_position_init, cfg.lr_position_final.max(1e-300), state.iteration, cfg.iterations)
        * state.extent;
    let lr_pos = if cfg.lr_position_init == 0.0 { 0.0 } else { lr_pos };
    let p = &mut state.params;
    let lrs = [lr_pos, cfg.lr_opacity, cfg.lr_alpha_aux, cfg.lr_color, cfg.lr_scale, cfg.lr_rotation];
    let groups: [&mut Vec<f64>; 6] = [&mut p.mu, &mut p.alpha, &mut p.alpha_aux, &mut p.color, &mut p.scale, &mut p.rot];
    for (k, group) in groups.into_iter().enumerate() {
        if k == 2 && p.frozen_aux.is_some() {
            continue;
        }
        state.adams[k].step(group, &g[k], lrs[k]);
    }
    for c in p.color.iter_mut() {
        *c = c.clamp(0.0, 1.0);
    }
    for q in p.rot.chunks_mut(4) {
        let mut a = [q[0], q[1], q[2], q[3]];
        normalize_quat(&mut a);
        q.copy_from_slice(&a);
    }
    state.iteration += 1;
    Ok(true)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: usize,
    pub l_color: f64,
    pub l_consis: f64,
    pub l_prior: f64,
    pub psnr: f64,
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from("iteration,L_color,L_consis,L_prior,PSNR\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{}", r.iteration, r.l_color, r.l_consis, r.l_prior, r.psnr);
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainResult {
    pub cloud: GaussianCloud,
    pub metrics: Vec<MetricsRow>,
    pub skipped_steps: usize,
}

/// Endless shuffled passes over the training views.
#[derive(Debug, Clone)]
pub struct ViewSampler {
    rng: ChaCha8Rng,
    views: Vec<usize>,
    order: Vec<usize>,
}

impl ViewSampler {
    pub fn new(views: &[usize], seed: u64) -> Self {
        ViewSampler {
            rng: ChaCha8Rng::seed_from_u64(seed),
            views: views.to_vec(),
            order: Vec::new(),
        }
    }

    pub fn next_view(&mut self) -> usize {
        if self.order.is_empty() {
            self.order = self.views.clone();
            self.order.shuffle(&mut self.rng);
            self.order.reverse();
        }
        self.order.pop().expect("non-empty view list")
    }
}

/// Runs `cfg.iterations` steps from `init`. With `output`, writes
/// `checkpoints/iter_NNNNNN.json` every `checkpoint_every` steps, then
/// `scene.json` and `metrics.csv`.
pub fn train(init: &GaussianCloud, data: &TrainData, cfg: &TrainConfig, output: Option<&Path>) -> Result<TrainResult> {
    cfg.validate()?;
    init.validate()?;
    if cfg.lambda_geo > 0.0 && cfg.lambda_prior > 0.0 && data.priors.is_empty() {
        return Err(Error::Config(
            "lambda_prior > 0 but the dataset has no point-map priors (set lambda_prior = 0 or provide pmaps)".into(),
        ));
    }
    if cfg.lambda_geo > 0.0 && cfg.lambda_consis > 0.0 && data.pairs.is_empty() && cfg.iterations > cfg.geometry_warmup {
        log::warn!("no consistency pairs selected; the consistency term is inactive");
    }
    if cfg.iterations == 0 {
        return Ok(TrainResult {
            cloud: init.clone(),
            metrics: Vec::new(),
            skipped_steps: 0,
        });
    }
    let settings = RenderSettings::default();
    let mut state = TrainState::new(init, cfg, camera_extent(&data.cameras));
    let mut views = ViewSampler::new(&data.train_views, cfg.seed);
    let mut pair_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut prior_cursor = 0usize;
    let mut metrics = Vec::with_capacity(cfg.iterations);
    let mut skipped = 0;
    for it in 0..cfg.iterations {
        let geo = cfg.geometry_on(it);
        let pair = (geo && cfg.lambda_consis > 0.0 && !data.pairs.is_empty())
            .then(|| data.pairs[pair_rng.random_range(0..data.pairs.len())]);
        let prior = (geo && cfg.lambda_prior > 0.0 && !data.priors.is_empty()).then(|| {
            let p = prior_cursor % data.priors.len();
            prior_cursor += 1;
            p
        });
        let batch = Batch {
            view: views.next_view(),
            pair,
            prior,
        };
        let cloud = state.cloud();
        let loss = total_loss(&cloud, data, &batch, cfg, &settings)?;
        if !loss.total.is_finite() || !step(&mut state, &loss.grad, cfg)? {
            if state.iteration == it {
                state.iteration += 1;
            }
            log::warn!("iteration {it}: non-finite loss or gradient, step skipped");
            skipped += 1;
        }
        metrics.push(MetricsRow {
            iteration: it + 1,
            l_color: loss.color,
            l_consis: loss.consis,
            l_prior: loss.prior,
            psnr: loss.psnr,
        });
        if (it + 1) % 500 == 0 {
            log::info!("iteration {}: loss {:.6} psnr {:.2}", it + 1, loss.total, loss.psnr);
        }
        if let Some(dir) = output {
            if cfg.checkpoint_every > 0 && (it + 1) % cfg.checkpoint_every == 0 {
                write_scene(
                    &dir.join("checkpoints").join(format!("iter_{:06}.json", it + 1)),
                    &SceneFile {
                        gaussians: state.cloud(),
                        cameras: Vec::new(),
                    },
                )?;
            }
        }
    }
    let cloud = state.cloud();
    if let Some(dir) = output {
        write_scene(
            &dir.join("scene.json"),
            &SceneFile {
                gaussians: cloud.clone(),
                cameras: data.cameras.clone(),
            },
        )?;
        write_file(&dir.join("metrics.csv"), metrics_csv(&metrics).as_bytes())?;
    }
    Ok(TrainResult {
        cloud,
        metrics,
        skipped_steps: skipped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// Appearance-path PSNR.
    pub psnr: f64,
    /// Mean absolute error of the normalized geometric-path depth over
    /// pixels with ground truth; uncovered pixels count as depth 0.
    pub depth_mae: Option<f64>,
}

pub fn evaluate(
    cloud: &GaussianCloud,
    cam: &Camera,
    gt: &ImageBuffer,
    gt_depth: Option<&DepthMap>,
    min_alpha: f64,
    backdrop: Option<&Backdrop>,
) -> Result<EvalMetrics> {
    let settings = RenderSettings::default();
    let out_o = render_with(cloud, cam, RenderPath::Appearance, &settings, backdrop);
    let psnr = psnr(&out_o.color, gt)?;
    let depth_mae = match gt_depth {
        Some(d) => {
            d.ensure_dims(cam.width, cam.height)?;
            let out_s = render_with(cloud, cam, RenderPath::Geometric, &settings, backdrop);
            let pred = out_s.normalized_depth(min_alpha);
            let (mut sum, mut n) = (0.0, 0usize);
            for (p, g) in pred.as_slice().iter().zip(d.as_slice()) {
                if *g > 0.0 {
                    sum += (p - g).abs();
                    n += 1;
                }
            }
            (n > 0).then(|| sum / n as f64)
        }
        None => None,
    };
    Ok(EvalMetrics { psnr, depth_mae })
}

/// Desk benchmark on the synthetic textured box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxBenchmark {
    pub iterations: usize,
    pub floaters: usize,
    pub seed: u64,
}

impl Default for BoxBenchmark {
    fn default() -> Self {
        BoxBenchmark {
            iterations: 3000,
            floaters: 12,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxBenchmarkReport {
    /// Held-out metrics of the full model trained from the clean start.
    pub clean: EvalMetrics,
    /// Held-out metrics from the floater start, color losses only.
    pub color_only: EvalMetrics,
    /// Held-out metrics from the floater start, all losses.
    pub full: EvalMetrics,
}

impl BoxBenchmarkReport {
    pub fn depth_mae_ratio(&self) -> Option<f64> {
        Some(self.full.depth_mae? / self.color_only.depth_mae?)
    }
}

pub fn box_benchmark(b: &BoxBenchmark) -> Result<BoxBenchmarkReport> {
    use crate::synth::{synth_scene, SceneKind, SynthSpec};
    let spec = SynthSpec {
        seed: b.seed,
        floaters: b.floaters,
        ..SynthSpec::new(SceneKind::Box)
    };
    let ds = synth_scene(&spec)?;
    let clean_init = GaussianCloud::new(ds.init.gaussians[..ds.reference.len()].to_vec());
    let dir = DatasetDir::from_synth(&ds)?;
    let data = TrainData::from_dataset(&dir, &SolverConfig::default())?;
    let full_cfg = TrainConfig {
        iterations: b.iterations,
        seed: b.seed,
        ..TrainConfig::default()
    };
    let color_cfg = TrainConfig {
        lambda_geo: 0.0,
        ..full_cfg.clone()
    };
    let h = ds.holdout[0];
    let eval = |c: &GaussianCloud| evaluate(c, &ds.cameras[h], &ds.images[h], Some(&ds.depths[h]), full_cfg.depth_min_alpha, None);
    let clean = eval(&train(&clean_init, &data, &full_cfg, None)?.cloud)?;
    let color_only = eval(&train(&ds.init, &data, &color_cfg, None)?.cloud)?;
    let full = eval(&train(&ds.init, &data, &full_cfg, None)?.cloud)?;
    Ok(BoxBenchmarkReport { clean, color_only, full })
}
