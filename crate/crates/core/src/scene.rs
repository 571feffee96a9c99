//! Gaussian primitives, the cloud container and covariance construction.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::camera::vec3_array;
use crate::error::{Error, Result};

/// One anisotropic 3D Gaussian. `rot` is a quaternion stored as `[w, x, y, z]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    #[serde(with = "vec3_array")]
    pub mu: Vector3<f64>,
    /// Geometric opacity.
    pub alpha: f64,
    /// Auxiliary opacity, multiplied onto `alpha` on the appearance path.
    pub alpha_aux: f64,
    #[serde(with = "vec3_array")]
    pub color: Vector3<f64>,
    #[serde(with = "vec3_array")]
    pub scale: Vector3<f64>,
    pub rot: [f64; 4],
}

pub const IDENTITY_QUAT: [f64; 4] = [1.0, 0.0, 0.0, 0.0];

impl Gaussian {
    pub fn isotropic(mu: Vector3<f64>, radius: f64, alpha: f64, color: Vector3<f64>) -> Self {
        Self {
            mu,
            alpha,
            alpha_aux: 1.0,
            color,
            scale: Vector3::repeat(radius),
            rot: IDENTITY_QUAT,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if !in_unit(self.alpha) || !in_unit(self.alpha_aux) {
            return Err(Error::InvalidParameter(format!(
                "opacities must lie in [0,1] (alpha={}, alpha_aux={})",
                self.alpha, self.alpha_aux
            )));
        }
        if self.scale.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidParameter(format!("non-positive scale {:?}", self.scale)));
        }
        let n = quat_norm(&self.rot);
        if (n - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter(format!("rotation quaternion has norm {n}")));
        }
        if !self.mu.iter().chain(self.color.iter()).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("gaussian center or color".into()));
        }
        Ok(())
    }

    /// `R(q) diag(scale^2) R(q)^T` without validating inputs.
    pub fn covariance(&self) -> Matrix3<f64> {
        covariance_unchecked(&self.scale, &self.rot)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GaussianCloud {
    pub gaussians: Vec<Gaussian>,
}

impl GaussianCloud {
    pub fn new(gaussians: Vec<Gaussian>) -> Self {
        Self { gaussians }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        self.gaussians.iter().try_for_each(Gaussian::validate)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Gaussian> {
        self.gaussians.iter()
    }
}

pub fn quat_norm(q: &[f64; 4]) -> f64 {
    q.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn normalize_quat(q: &mut [f64; 4]) {
    let n = quat_norm(q);
    if n > 0.0 && n.is_finite() {
        q.iter_mut().for_each(|v| *v /= n);
    } else {
        *q = IDENTITY_QUAT;
    }
}

/// Rotation matrix of a unit quaternion `[w, x, y, z]`. The formula is applied
/// as-is to non-unit input (no normalization inside the forward pass).
pub fn rotation_from_quat(q: &[f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = *q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Pulls a gradient on the rotation matrix back to the quaternion components.
pub fn rotation_from_quat_backward(q: &[f64; 4], g: &Matrix3<f64>) -> [f64; 4] {
    let [w, x, y, z] = *q;
    let dw = 2.0 * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)]
        + x * g[(2, 1)]);
    let dx = 2.0
        * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)]
            + z * g[(2, 0)]
            + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]);
    let dy = 2.0
        * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)]
            - w * g[(2, 0)]
            + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]);
    let dz = 2.0
        * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)]
            - 2.0 * z * g[(1, 1)]
            + y * g[(1, 2)]
            + x * g[(2, 0)]
            + y * g[(2, 1)]);
    [dw, dx, dy, dz]
}

fn covariance_unchecked(scale: &Vector3<f64>, rot: &[f64; 4]) -> Matrix3<f64> {
    let r = rotation_from_quat(rot);
    let s2 = Matrix3::from_diagonal(&scale.component_mul(scale));
    r * s2 * r.transpose()
}

/// Covariance `R(q) diag(s^2) R(q)^T`.
pub fn covariance_from(scale: &Vector3<f64>, rot: &[f64; 4]) -> Result<Matrix3<f64>> {
    if scale.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::InvalidParameter(format!("non-positive scale {scale:?}")));
    }
    Ok(covariance_unchecked(scale, rot))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{SymmetricEigen, UnitQuaternion};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_unit_quat(rng: &mut impl Rng) -> [f64; 4] {
        let mut q = [0.0; 4];
        for v in q.iter_mut() {
            *v = rng.random::<f64>() * 2.0 - 1.0;
        }
        normalize_quat(&mut q);
        q
    }

    #[test]
    fn isotropic_unit_is_identity() {
        let c = covariance_from(&Vector3::repeat(1.0), &IDENTITY_QUAT).unwrap();
        assert!((c - Matrix3::identity()).abs().max() < 1e-15);
    }

    #[test]
    fn quarter_turn_permutes_axes() {
        let h = std::f64::consts::FRAC_PI_4;
        let q = [h.cos(), 0.0, 0.0, h.sin()];
        let c = covariance_from(&Vector3::new(2.0, 1.0, 1.0), &q).unwrap();
        let expect = Matrix3::from_diagonal(&Vector3::new(1.0, 4.0, 1.0));
        assert!((c - expect).abs().max() < 1e-12, "{c}");
    }

    #[test]
    fn rejects_non_positive_scale() {
        assert!(covariance_from(&Vector3::new(1.0, 0.0, 1.0), &IDENTITY_QUAT).is_err());
        assert!(covariance_from(&Vector3::new(1.0, -2.0, 1.0), &IDENTITY_QUAT).is_err());
    }

    #[test]
    fn eigenvalues_match_squared_scales() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let s = Vector3::new(
                0.05 + rng.random::<f64>(),
                0.05 + rng.random::<f64>(),
                0.05 + rng.random::<f64>(),
            );
            let q = random_unit_quat(&mut rng);
            let c = covariance_from(&s, &q).unwrap();
            assert!((c - c.transpose()).abs().max() < 1e-15);
            let mut eig: Vec<f64> = SymmetricEigen::new(c).eigenvalues.iter().copied().collect();
            eig.sort_by(f64::total_cmp);
            let mut s2: Vec<f64> = s.iter().map(|v| v * v).collect();
            s2.sort_by(f64::total_cmp);
            for (a, b) in eig.iter().zip(&s2) {
                assert!((a - b).abs() < 1e-9, "{eig:?} vs {s2:?}");
            }
            assert!(c.cholesky().is_some());
            let neg = [-q[0], -q[1], -q[2], -q[3]];
            assert_eq!(covariance_from(&s, &neg).unwrap(), c);
        }
    }

    #[test]
    fn rotation_matches_nalgebra() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let q = random_unit_quat(&mut rng);
            let uq = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]));
            let diff = (rotation_from_quat(&q) - uq.to_rotation_matrix().into_inner()).abs().max();
            assert!(diff < 1e-12);
        }
    }

    #[test]
    fn quat_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = random_unit_quat(&mut rng);
        let g = Matrix3::from_fn(|_, _| rng.random::<f64>() - 0.5);
        let f = |q: &[f64; 4]| rotation_from_quat(q).component_mul(&g).sum();
        let analytic = rotation_from_quat_backward(&q, &g);
        for k in 0..4 {
            let h = 1e-6;
            let mut qp = q;
            qp[k] += h;
            let mut qm = q;
            qm[k] -= h;
            let fd = (f(&qp) - f(&qm)) / (2.0 * h);
            assert!((fd - analytic[k]).abs() < 1e-8, "component {k}: {fd} vs {}", analytic[k]);
        }
    }

    #[test]
    fn validate_catches_bad_fields() {
        let mut g = Gaussian::isotropic(Vector3::zeros(), 0.1, 0.5, Vector3::repeat(0.5));
        assert!(g.validate().is_ok());
        g.alpha = 1.5;
        assert!(g.validate().is_err());
        g.alpha = 0.5;
        g.rot = [2.0, 0.0, 0.0, 0.0];
        assert!(g.validate().is_err());
    }
}
