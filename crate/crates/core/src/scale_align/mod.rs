//! Global scale alignment of pairwise point-map priors.
//!
//! Each unordered view pair contributes two directed records. Record `(i, j)`
//! holds image `i`'s points in frame `i` (`x11`), image `j`'s points in frame
//! `i` (`x21`) and their confidences. The pairwise alignment residual of a
//! pair is a weighted point-matching problem under the map
//!
//! ```text
//! M = [ s_ij R_i | -s_ji R_j | s_ij t_i - s_ji t_j ]
//! ```
//!
//! applied to `z = [Y1, Y2, 1]`, where `(R, t)` are camera-to-world poses.
//! Its quadratic form only depends on the 7x7 Gram matrix of the weighted
//! `z`, so every pair is compressed to seven weighted equivalent points.

mod solve;
pub mod synthetic;

use nalgebra::{SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::buffer::{Grid, ImageBuffer};
use crate::camera::RigidTransform;
use crate::error::{Error, Result};
use crate::geometry::PairPrior;

pub use solve::{scale_objective, solve_scales, scales_from_table, scales_to_table, ScaleSolution, SolverConfig};

pub type PointMap = ImageBuffer;
pub type ConfidenceMap = Grid<f64>;
pub type Gram = SMatrix<f64, 7, 7>;

/// One directed point-map prediction for the view pair `(i, j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointMapRecord {
    pub i: usize,
    pub j: usize,
    /// Image `i` points in camera frame `i`.
    pub x11: PointMap,
    pub c11: ConfidenceMap,
    /// Image `j` points in camera frame `i`.
    pub x21: PointMap,
    pub c21: ConfidenceMap,
}

impl PointMapRecord {
    pub fn validate(&self) -> Result<()> {
        if self.i == self.j {
            return Err(Error::InvalidParameter(format!("record pairs view {} with itself", self.i)));
        }
        self.x11.ensure_same(&self.c11)?;
        self.x21.ensure_same(&self.c21)?;
        for c in self.c11.as_slice().iter().chain(self.c21.as_slice()) {
            if !(*c >= 0.0 && c.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "record ({}, {}): confidence {c} is not a finite non-negative value",
                    self.i, self.j
                )));
            }
        }
        if let Some(p) = self.x11.as_slice().iter().chain(self.x21.as_slice()).find(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(Error::NonFinite(format!("record ({}, {}) point {p:?}", self.i, self.j)));
        }
        Ok(())
    }

    pub fn confidence_sum(&self) -> f64 {
        self.c11.as_slice().iter().sum()
    }

    /// Depth prior for view `i` once the record's scale is known: the scaled
    /// z channel of `x11`, zero where it is not in front of the camera.
    pub fn to_pair_prior(&self, scale: f64) -> PairPrior {
        PairPrior {
            view: self.i,
            partner: self.j,
            depth: self.x11.map(|p| if p.z > 0.0 { scale * p.z } else { 0.0 }),
            confidence: self.c11.clone(),
        }
    }
}

/// `C(i,j) = C11_ij C21_ji / (C11_ij + C21_ji)`, with 0 where both vanish.
pub fn pair_weight_map(c_a: &ConfidenceMap, c_b: &ConfidenceMap) -> Result<ConfidenceMap> {
    c_a.ensure_same(c_b)?;
    let data = c_a
        .as_slice()
        .iter()
        .zip(c_b.as_slice())
        .map(|(a, b)| {
            let s = a + b;
            if s > 0.0 {
                a * b / s
            } else {
                0.0
            }
        })
        .collect();
    Grid::from_vec(c_a.width(), c_a.height(), data)
}

/// Seven weighted equivalent points reproducing a pair's Gram matrix.
///
/// Column `k` contributes `|| w_k (A1 x_k - A2 y_k + b h_k) ||^2` where
/// `h_k = 1` except for the listed degenerate columns.
#[derive(Debug, Clone, PartialEq)]
pub struct EquivalentPointSet {
    pub x: SMatrix<f64, 3, 7>,
    pub y: SMatrix<f64, 3, 7>,
    pub w: SVector<f64, 7>,
    pub degenerate_columns: Vec<DegenerateColumn>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DegenerateColumn {
    pub index: usize,
    /// Homogeneous coordinate of the unnormalized factor column.
    pub homogeneous: f64,
}

pub const DEGENERATE_EPS: f64 = 1e-12;

impl EquivalentPointSet {
    fn homogeneous(&self, k: usize) -> f64 {
        self.degenerate_columns
            .iter()
            .find(|d| d.index == k)
            .map_or(1.0, |d| d.homogeneous)
    }

    /// Column `k` as the 7-vector `w_k [x_k; y_k; h_k]`.
    pub fn factor_column(&self, k: usize) -> SVector<f64, 7> {
        let mut f = SVector::<f64, 7>::zeros();
        f.fixed_rows_mut::<3>(0).copy_from(&self.x.column(k));
        f.fixed_rows_mut::<3>(3).copy_from(&self.y.column(k));
        f[6] = self.homogeneous(k);
        f * self.w[k]
    }

    pub fn gram(&self) -> Gram {
        (0..7).fold(Gram::zeros(), |g, k| {
            let f = self.factor_column(k);
            g + f * f.transpose()
        })
    }

    /// `sum_k || M f_k ||^2` for an arbitrary 3x7 map `M = [A1, -A2, b]`.
    pub fn quadratic_form(&self, m: &SMatrix<f64, 3, 7>) -> f64 {
        (0..7).map(|k| (m * self.factor_column(k)).norm_squared()).sum()
    }

    pub fn storage_scalars(&self) -> usize {
        self.x.len() + self.y.len() + self.w.len()
    }
}

/// Weighted Gram matrix `[Y1, Y2, 1]^T diag(J^2) [Y1, Y2, 1]`.
pub fn gram_matrix(y1: &[Vector3<f64>], y2: &[Vector3<f64>], weights: &[f64]) -> Result<Gram> {
    if y1.len() != y2.len() || y1.len() != weights.len() {
        return Err(Error::InvalidParameter(format!(
            "point sets of length {}, {} with {} weights",
            y1.len(),
            y2.len(),
            weights.len()
        )));
    }
    let mut g = Gram::zeros();
    for ((a, b), w) in y1.iter().zip(y2).zip(weights) {
        if !(*w >= 0.0) {
            return Err(Error::InvalidParameter(format!("negative weight {w}")));
        }
        let z = SVector::<f64, 7>::from_column_slice(&[a.x, a.y, a.z, b.x, b.y, b.z, 1.0]);
        g += z * z.transpose() * (w * w);
    }
    Ok(g)
}

pub fn compress_gram(g: &Gram) -> EquivalentPointSet {
    let sym = (g + g.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut x = SMatrix::<f64, 3, 7>::zeros();
    let mut y = SMatrix::<f64, 3, 7>::zeros();
    let mut w = SVector::<f64, 7>::zeros();
    let mut degenerate_columns = Vec::new();
    for k in 0..7 {
        let xi = eig.eigenvalues[k].max(0.0).sqrt();
        let v = eig.eigenvectors.column(k);
        if v[6].abs() < DEGENERATE_EPS {
            x.set_column(k, &(v.fixed_rows::<3>(0) * xi));
            y.set_column(k, &(v.fixed_rows::<3>(3) * xi));
            w[k] = 1.0;
            degenerate_columns.push(DegenerateColumn {
                index: k,
                homogeneous: xi * v[6],
            });
        } else {
            x.set_column(k, &(v.fixed_rows::<3>(0) / v[6]));
            y.set_column(k, &(v.fixed_rows::<3>(3) / v[6]));
            w[k] = xi * v[6];
        }
    }
    EquivalentPointSet {
        x,
        y,
        w,
        degenerate_columns,
    }
}

/// Compresses two matched point sets with per-point weights.
pub fn compress(y1: &[Vector3<f64>], y2: &[Vector3<f64>], weights: &[f64]) -> Result<EquivalentPointSet> {
    if y1.is_empty() {
        return Err(Error::InvalidParameter("cannot compress an empty point set".into()));
    }
    Ok(compress_gram(&gram_matrix(y1, y2, weights)?))
}

/// The stacked matching problem of a pair: `Y1 = [X11_ij; X21_ij]` (frame
/// `i`), `Y2 = [X21_ji; X11_ji]` (frame `j`), weights `[C(i,j); C(j,i)]`.
pub fn stacked_problem(
    rec_ij: &PointMapRecord,
    rec_ji: &PointMapRecord,
) -> Result<(Vec<Vector3<f64>>, Vec<Vector3<f64>>, Vec<f64>)> {
    if rec_ij.i != rec_ji.j || rec_ij.j != rec_ji.i {
        return Err(Error::InvalidParameter(format!(
            "records ({}, {}) and ({}, {}) are not mirrored",
            rec_ij.i, rec_ij.j, rec_ji.i, rec_ji.j
        )));
    }
    rec_ij.validate()?;
    rec_ji.validate()?;
    let cw_ij = pair_weight_map(&rec_ij.c11, &rec_ji.c21)?;
    let cw_ji = pair_weight_map(&rec_ji.c11, &rec_ij.c21)?;
    rec_ij.x11.ensure_same(&rec_ji.x21)?;
    rec_ij.x21.ensure_same(&rec_ji.x11)?;
    let y1 = rec_ij.x11.as_slice().iter().chain(rec_ij.x21.as_slice()).copied().collect();
    let y2 = rec_ji.x21.as_slice().iter().chain(rec_ji.x11.as_slice()).copied().collect();
    let w = cw_ij.as_slice().iter().chain(cw_ji.as_slice()).copied().collect();
    Ok((y1, y2, w))
}

pub fn compress_pair(rec_ij: &PointMapRecord, rec_ji: &PointMapRecord) -> Result<EquivalentPointSet> {
    let (y1, y2, w) = stacked_problem(rec_ij, rec_ji)?;
    compress(&y1, &y2, &w)
}

/// `[s_ij R_i | -s_ji R_j | s_ij t_i - s_ji t_j]`.
pub fn pair_map(s_ij: f64, s_ji: f64, t_i: &RigidTransform, t_j: &RigidTransform) -> SMatrix<f64, 3, 7> {
    let mut m = SMatrix::<f64, 3, 7>::zeros();
    m.fixed_columns_mut::<3>(0).copy_from(&(t_i.rotation * s_ij));
    m.fixed_columns_mut::<3>(3).copy_from(&(t_j.rotation * -s_ji));
    m.set_column(6, &(t_i.translation * s_ij - t_j.translation * s_ji));
    m
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairLoss {
    pub value: f64,
    pub d_s_ij: f64,
    pub d_s_ji: f64,
}

/// Compressed pairwise alignment loss and its gradient in both scales.
pub fn pair_loss_eff(
    eq: &EquivalentPointSet,
    s_ij: f64,
    s_ji: f64,
    t_i: &RigidTransform,
    t_j: &RigidTransform,
) -> PairLoss {
    let mut a_map = SMatrix::<f64, 3, 7>::zeros();
    a_map.fixed_columns_mut::<3>(0).copy_from(&t_i.rotation);
    a_map.set_column(6, &t_i.translation);
    let mut c_map = SMatrix::<f64, 3, 7>::zeros();
    c_map.fixed_columns_mut::<3>(3).copy_from(&t_j.rotation);
    c_map.set_column(6, &t_j.translation);
    let (mut value, mut d_ij, mut d_ji) = (0.0, 0.0, 0.0);
    for k in 0..7 {
        let f = eq.factor_column(k);
        let a = a_map * f;
        let c = c_map * f;
        let r = a * s_ij - c * s_ji;
        value += r.norm_squared();
        d_ij += 2.0 * r.dot(&a);
        d_ji -= 2.0 * r.dot(&c);
    }
    PairLoss {
        value,
        d_s_ij: d_ij,
        d_s_ji: d_ji,
    }
}

/// Coefficients of the homogeneous quadratic
/// `L(s_ij, s_ji) = P s_ij^2 - 2 Q s_ij s_ji + R s_ji^2`.
pub fn pair_quadratic(eq: &EquivalentPointSet, t_i: &RigidTransform, t_j: &RigidTransform) -> (f64, f64, f64) {
    let (mut p, mut q, mut r) = (0.0, 0.0, 0.0);
    for k in 0..7 {
        let f = eq.factor_column(k);
        let a = t_i.rotation * f.fixed_rows::<3>(0) + t_i.translation * f[6];
        let c = t_j.rotation * f.fixed_rows::<3>(3) + t_j.translation * f[6];
        p += a.norm_squared();
        q += a.dot(&c);
        r += c.norm_squared();
    }
    (p, q, r)
}

/// Direct evaluation over every pixel of both records.
pub fn pair_loss_bruteforce(
    rec_ij: &PointMapRecord,
    rec_ji: &PointMapRecord,
    s_ij: f64,
    s_ji: f64,
    t_i: &RigidTransform,
    t_j: &RigidTransform,
) -> Result<f64> {
    let cw_ij = pair_weight_map(&rec_ij.c11, &rec_ji.c21)?;
    let cw_ji = pair_weight_map(&rec_ji.c11, &rec_ij.c21)?;
    let term = |p: &Vector3<f64>, q: &Vector3<f64>, c: f64| {
        let r = (t_i.apply(p)) * s_ij - (t_j.apply(q)) * s_ji;
        c * c * r.norm_squared()
    };
    let mut sum = 0.0;
    for k in 0..rec_ij.x11.len() {
        sum += term(&rec_ij.x11.as_slice()[k], &rec_ji.x21.as_slice()[k], cw_ij.as_slice()[k]);
    }
    for k in 0..rec_ij.x21.len() {
        sum += term(&rec_ij.x21.as_slice()[k], &rec_ji.x11.as_slice()[k], cw_ji.as_slice()[k]);
    }
    Ok(sum)
}

/// Index into `records` of the anchor for view `i`: the record `(i, k)` with
/// the largest `sum C11`, ties broken by the smallest `k`.
pub fn select_anchor(i: usize, records: &[PointMapRecord]) -> Result<usize> {
    let mut best: Option<(usize, f64, usize)> = None;
    for (idx, r) in records.iter().enumerate() {
        if r.i != i {
            continue;
        }
        let s = r.confidence_sum();
        let better = match best {
            None => true,
            Some((_, bs, bk)) => s > bs || (s == bs && r.j < bk),
        };
        if better {
            best = Some((idx, s, r.j));
        }
    }
    best.map(|b| b.0).ok_or(Error::NoPairs(i))
}

/// Penalty applied to each weighted coordinate difference of the intra term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum IntraPenalty {
    L1,
    Huber { width: f64 },
}

pub const HUBER_WIDTH: f64 = 1e-3;

impl Default for IntraPenalty {
    fn default() -> Self {
        IntraPenalty::Huber { width: HUBER_WIDTH }
    }
}

impl IntraPenalty {
    /// Curvature `w` of the quadratic `w r^2 / 2 + const` that majorizes the
    /// penalty and touches it at `r0`.
    pub fn majorizer_weight(self, r0: f64) -> f64 {
        match self {
            IntraPenalty::L1 => 1.0 / r0.abs().max(1e-12),
            IntraPenalty::Huber { width } => 1.0 / r0.abs().max(width),
        }
    }

    /// Value and derivative at `u`.
    #[inline]
    pub fn eval(self, u: f64) -> (f64, f64) {
        match self {
            IntraPenalty::L1 => (u.abs(), if u > 0.0 { 1.0 } else if u < 0.0 { -1.0 } else { 0.0 }),
            IntraPenalty::Huber { width } => {
                if u.abs() <= width {
                    (0.5 * u * u / width, u / width)
                } else {
                    (u.abs() - 0.5 * width, u.signum())
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntraLoss {
    pub value: f64,
    pub d_s_ij: f64,
    pub d_s_ia: f64,
}

/// `|| C(i,a) (s_ij X11_ij - s_ia X11_ia) ||_1` under `penalty`, where
/// `weight` is `C(i,a)`.
pub fn intra_loss(
    x11_ij: &PointMap,
    x11_ia: &PointMap,
    weight: &ConfidenceMap,
    s_ij: f64,
    s_ia: f64,
    penalty: IntraPenalty,
) -> Result<IntraLoss> {
    x11_ij.ensure_same(x11_ia)?;
    x11_ij.ensure_same(weight)?;
    let (mut value, mut d_ij, mut d_ia) = (0.0, 0.0, 0.0);
    for ((p, q), c) in x11_ij.as_slice().iter().zip(x11_ia.as_slice()).zip(weight.as_slice()) {
        if *c == 0.0 {
            continue;
        }
        for k in 0..3 {
            let (v, g) = penalty.eval(c * (s_ij * p[k] - s_ia * q[k]));
            value += v;
            d_ij += g * c * p[k];
            d_ia -= g * c * q[k];
        }
    }
    Ok(IntraLoss {
        value,
        d_s_ij: d_ij,
        d_s_ia: d_ia,
    })
}

#[cfg(test)]
mod tests;
