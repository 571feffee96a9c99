//! Planar homography fitting: normalized 4-point DLT inside RANSAC.

use nalgebra::{Matrix3, SMatrix, Vector2, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const RANSAC_ITERATIONS: usize = 1000;
pub const RANSAC_THRESHOLD_PX: f64 = 3.0;
pub const RANSAC_SEED: u64 = 0x5eed_d15c;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HomographyFit {
    pub h: Matrix3<f64>,
    pub inliers: usize,
    pub total: usize,
}

impl HomographyFit {
    pub fn inlier_fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.inliers as f64 / self.total as f64
        }
    }
}

pub fn apply_homography(h: &Matrix3<f64>, p: &Vector2<f64>) -> Option<Vector2<f64>> {
    let q = h * Vector3::new(p.x, p.y, 1.0);
    if q.z.abs() < 1e-12 {
        None
    } else {
        Some(Vector2::new(q.x / q.z, q.y / q.z))
    }
}

/// Similarity moving the centroid to the origin with mean distance sqrt(2).
fn normalizer(pts: &[Vector2<f64>]) -> Matrix3<f64> {
    let n = pts.len() as f64;
    let c = pts.iter().fold(Vector2::zeros(), |a, p| a + p) / n;
    let mean = pts.iter().map(|p| (p - c).norm()).sum::<f64>() / n;
    let s = if mean > 1e-12 { std::f64::consts::SQRT_2 / mean } else { 1.0 };
    Matrix3::new(s, 0.0, -s * c.x, 0.0, s, -s * c.y, 0.0, 0.0, 1.0)
}

fn has_collinear_triple(p: &[Vector2<f64>]) -> bool {
    let scale = p.iter().map(|q| (q - p[0]).norm_squared()).fold(0.0, f64::max).max(1e-300);
    (0..p.len()).any(|a| {
        (a + 1..p.len()).any(|b| {
            (b + 1..p.len()).any(|c| {
                let (u, v) = (p[b] - p[a], p[c] - p[a]);
                (u.x * v.y - u.y * v.x).abs() < 1e-9 * scale
            })
        })
    })
}

/// Direct linear transform `dst ~ H src` from four or more correspondences.
pub fn fit_dlt(src: &[Vector2<f64>], dst: &[Vector2<f64>]) -> Option<Matrix3<f64>> {
    assert_eq!(src.len(), dst.len());
    if src.len() < 4 || (src.len() == 4 && (has_collinear_triple(src) || has_collinear_triple(dst))) {
        return None;
    }
    let ts = normalizer(src);
    let td = normalizer(dst);
    let mut ata = SMatrix::<f64, 9, 9>::zeros();
    for (p, q) in src.iter().zip(dst) {
        let a = ts * Vector3::new(p.x, p.y, 1.0);
        let b = td * Vector3::new(q.x, q.y, 1.0);
        let r1 = SMatrix::<f64, 1, 9>::from_row_slice(&[
            0.0, 0.0, 0.0, -b.z * a.x, -b.z * a.y, -b.z * a.z, b.y * a.x, b.y * a.y, b.y * a.z,
        ]);
        let r2 = SMatrix::<f64, 1, 9>::from_row_slice(&[
            b.z * a.x, b.z * a.y, b.z * a.z, 0.0, 0.0, 0.0, -b.x * a.x, -b.x * a.y, -b.x * a.z,
        ]);
        ata += r1.transpose() * r1 + r2.transpose() * r2;
    }
    let eig = ata.symmetric_eigen();
    let (k, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))?;
    let v = eig.eigenvectors.column(k);
    let hn = Matrix3::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8]);
    let h = td.try_inverse()? * hn * ts;
    if !h.iter().all(|x| x.is_finite()) || h.determinant().abs() < 1e-14 * h.norm().powi(3) {
        return None;
    }
    Some(h / h.norm())
}

fn count_inliers(h: &Matrix3<f64>, src: &[Vector2<f64>], dst: &[Vector2<f64>], thr: f64) -> usize {
    src.iter()
        .zip(dst)
        .filter(|(p, q)| apply_homography(h, p).is_some_and(|r| (r - *q).norm() < thr))
        .count()
}

/// Best 4-point hypothesis over a fixed number of seeded RANSAC draws.
/// Fewer than four correspondences yields `None`.
pub fn ransac_homography(
    src: &[Vector2<f64>],
    dst: &[Vector2<f64>],
    iterations: usize,
    threshold: f64,
    seed: u64,
) -> Option<HomographyFit> {
    let n = src.len();
    if n < 4 || dst.len() != n {
        return None;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<HomographyFit> = None;
    for _ in 0..iterations {
        let idx = sample(&mut rng, n, 4);
        let s: Vec<Vector2<f64>> = idx.iter().map(|k| src[k]).collect();
        let d: Vec<Vector2<f64>> = idx.iter().map(|k| dst[k]).collect();
        let Some(h) = fit_dlt(&s, &d) else { continue };
        let inliers = count_inliers(&h, src, dst, threshold);
        if best.is_none_or(|b| inliers > b.inliers) {
            best = Some(HomographyFit { h, inliers, total: n });
            if inliers == n {
                break;
            }
        }
    }
    Some(best.unwrap_or(HomographyFit {
        h: Matrix3::identity(),
        inliers: 0,
        total: n,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn sample_h() -> Matrix3<f64> {
        Matrix3::new(1.1, 0.05, 3.0, -0.02, 0.95, -2.0, 1e-4, -2e-4, 1.0)
    }

    #[test]
    fn dlt_recovers_exact_homography() {
        let h = sample_h();
        let src = vec![
            Vector2::new(0.0, 0.0),
            Vector2::new(40.0, 3.0),
            Vector2::new(5.0, 30.0),
            Vector2::new(37.0, 41.0),
            Vector2::new(20.0, 18.0),
        ];
        let dst: Vec<_> = src.iter().map(|p| apply_homography(&h, p).unwrap()).collect();
        let est = fit_dlt(&src, &dst).unwrap();
        for p in &src {
            let a = apply_homography(&est, p).unwrap();
            let b = apply_homography(&h, p).unwrap();
            assert!((a - b).norm() < 1e-8);
        }
    }

    #[test]
    fn collinear_sample_is_degenerate() {
        let src: Vec<_> = (0..4).map(|k| Vector2::new(k as f64, 2.0 * k as f64)).collect();
        assert!(fit_dlt(&src, &src).is_none());
    }

    #[test]
    fn ransac_half_outliers() {
        let h = sample_h();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut src = Vec::new();
        let mut dst = Vec::new();
        for k in 0..40 {
            let p = Vector2::new(rng.random_range(0.0..64.0), rng.random_range(0.0..64.0));
            let q = if k % 2 == 0 {
                apply_homography(&h, &p).unwrap()
            } else {
                apply_homography(&h, &p).unwrap()
                    + Vector2::new(rng.random_range(10.0..30.0), rng.random_range(-30.0..-10.0))
            };
            src.push(p);
            dst.push(q);
        }
        let fit = ransac_homography(&src, &dst, RANSAC_ITERATIONS, RANSAC_THRESHOLD_PX, RANSAC_SEED).unwrap();
        assert_eq!(fit.inliers, 20);
        assert!((fit.inlier_fraction() - 0.5).abs() < 1e-12);
        let again = ransac_homography(&src, &dst, RANSAC_ITERATIONS, RANSAC_THRESHOLD_PX, RANSAC_SEED).unwrap();
        assert_eq!(fit, again);
    }

    #[test]
    fn too_few_points() {
        let p = vec![Vector2::new(0.0, 0.0); 3];
        assert!(ransac_homography(&p, &p, 10, 3.0, 1).is_none());
    }
}
