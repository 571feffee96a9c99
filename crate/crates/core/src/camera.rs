//! Pinhole camera with a world-to-camera rigid pose.
//!
//! Convention: `x_cam = R * x_world + t`, +z looks forward, the image origin
//! is the top-left corner and pixel centers sit at integer coordinates.

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Projections with `|z|` below this are flagged instead of divided.
pub const MIN_PROJECT_Z: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-to-camera rotation, row-major.
    #[serde(with = "mat3_rows")]
    pub rotation: Matrix3<f64>,
    /// World-to-camera translation.
    #[serde(with = "vec3_array")]
    pub translation: Vector3<f64>,
    pub width: usize,
    pub height: usize,
}

/// Camera-to-world transform `x_world = rotation * x_cam + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    #[inline]
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }
}

impl Camera {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            rotation,
            translation,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target`, with image "down" roughly along `-up`.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        focal: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up);
        if right.norm() < 1e-9 {
            return Err(Error::InvalidParameter(
                "look_at: up vector parallel to viewing direction".into(),
            ));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        Self::new(
            focal,
            focal,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
            rotation,
            translation,
            width,
            height,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 1 || self.height < 1 {
            return Err(Error::InvalidParameter("camera dimensions must be >= 1".into()));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidParameter("focal lengths must be positive".into()));
        }
        let r = &self.rotation;
        let ortho = (r * r.transpose() - Matrix3::identity()).abs().max();
        if ortho > 1e-9 || (r.determinant() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter(
                "camera rotation must be orthonormal with det +1".into(),
            ));
        }
        Ok(())
    }

    #[inline]
    pub fn to_camera(&self, x_world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x_world + self.translation
    }

    /// Projects a world point. Returns `None` when `|z| < 1e-12`; points
    /// behind the camera (`z < 0`) are still projected and the caller checks.
    pub fn project(&self, x_world: &Vector3<f64>) -> Option<(Vector2<f64>, f64)> {
        let xc = self.to_camera(x_world);
        self.project_camera(&xc)
    }

    #[inline]
    pub fn project_camera(&self, xc: &Vector3<f64>) -> Option<(Vector2<f64>, f64)> {
        let z = xc.z;
        if z.abs() < MIN_PROJECT_Z {
            return None;
        }
        Some((
            Vector2::new(self.fx * xc.x / z + self.cx, self.fy * xc.y / z + self.cy),
            z,
        ))
    }

    /// Camera-frame ray through `pixel` scaled so that its z component is 1.
    #[inline]
    pub fn ray(&self, pixel: &Vector2<f64>) -> Vector3<f64> {
        Vector3::new((pixel.x - self.cx) / self.fx, (pixel.y - self.cy) / self.fy, 1.0)
    }

    pub fn unproject(&self, pixel: &Vector2<f64>, z: f64) -> Result<Vector3<f64>> {
        if !(z > 0.0) {
            return Err(Error::InvalidDepth(z));
        }
        let xc = self.ray(pixel) * z;
        Ok(self.rotation.transpose() * (xc - self.translation))
    }

    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn cam_to_world(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn contains(&self, pixel: &Vector2<f64>) -> bool {
        pixel.x >= -0.5
            && pixel.y >= -0.5
            && pixel.x < self.width as f64 - 0.5
            && pixel.y < self.height as f64 - 0.5
    }

    /// Rotation angle between two camera orientations, in degrees.
    pub fn relative_rotation_deg(&self, other: &Camera) -> f64 {
        let rel = other.rotation * self.rotation.transpose();
        let c = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        c.acos().to_degrees()
    }
}

pub(crate) mod mat3_rows {
    use nalgebra::Matrix3;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &Matrix3<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: [[f64; 3]; 3] = [
            [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
            [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
            [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
        ];
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Matrix3<f64>, D::Error> {
        let r = <[[f64; 3]; 3]>::deserialize(d)?;
        Ok(Matrix3::new(
            r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
        ))
    }
}

pub(crate) mod vec3_array {
    use nalgebra::Vector3;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &Vector3<f64>, s: S) -> Result<S::Ok, S::Error> {
        [v.x, v.y, v.z].serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vector3<f64>, D::Error> {
        let a = <[f64; 3]>::deserialize(d)?;
        Ok(Vector3::new(a[0], a[1], a[2]))
    }
}
