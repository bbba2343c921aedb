use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::GeometryError;

const ORTHO_TOL: f64 = 1e-9;

/// World-from-camera rotation plus camera origin. Camera axes follow the
/// x-right, y-down, z-forward convention.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraPose {
    rotation: Matrix3<f64>,
    origin: Vector3<f64>,
}

impl CameraPose {
    pub fn new(rotation: Matrix3<f64>, origin: Vector3<f64>) -> Result<Self, GeometryError> {
        let err = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        let det = rotation.determinant();
        if err > ORTHO_TOL || (det - 1.0).abs() > ORTHO_TOL || !origin.iter().all(|x| x.is_finite()) {
            return Err(GeometryError::InvalidPose {
                orthogonality: err,
                det,
            });
        }
        Ok(Self { rotation, origin })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            origin: Vector3::zeros(),
        }
    }

    /// Camera at `eye` looking at `target`, with `up` pointing towards the top of the image.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Result<Self, GeometryError> {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up);
        if right.norm() < 1e-12 {
            return Err(GeometryError::DegenerateLookAt);
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_columns(&[right, down, forward]);
        Self::new(rotation, eye)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn origin(&self) -> Vector3<f64> {
        self.origin
    }

    /// Camera forward axis in world coordinates.
    pub fn forward(&self) -> Vector3<f64> {
        self.rotation.column(2).into_owned()
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.origin)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PinholeIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl PinholeIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self, GeometryError> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.width > 0
            && self.height > 0
            && (0.0..self.width as f64).contains(&self.cx)
            && (0.0..self.height as f64).contains(&self.cy);
        if ok {
            Ok(())
        } else {
            Err(GeometryError::InvalidIntrinsics(*self))
        }
    }

    /// Square image with a given horizontal field of view (radians) and a centred principal point.
    pub fn from_fov(fov_x: f64, width: usize, height: usize) -> Result<Self, GeometryError> {
        let f = 0.5 * width as f64 / (0.5 * fov_x).tan();
        Self::new(f, f, 0.5 * width as f64, 0.5 * height as f64, width, height)
    }

    /// `K⁻¹ (px + 0.5, py + 0.5, 1)` for pixel indices `(px, py)`; z component is 1.
    pub fn camera_ray(&self, px: f64, py: f64) -> Vector3<f64> {
        Vector3::new((px + 0.5 - self.cx) / self.fx, (py + 0.5 - self.cy) / self.fy, 1.0)
    }

    /// Projects a camera-space point to continuous pixel coordinates (pixel
    /// centres at integer + 0.5).
    pub fn project(&self, pc: &Vector3<f64>) -> (f64, f64) {
        (self.fx * pc.x / pc.z + self.cx, self.fy * pc.y / pc.z + self.cy)
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

/// A posed camera: pose plus intrinsics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub pose: CameraPose,
    pub intrinsics: PinholeIntrinsics,
}

impl Camera {
    pub fn new(pose: CameraPose, intrinsics: PinholeIntrinsics) -> Self {
        Self { pose, intrinsics }
    }

    /// Unit world-space ray direction through the centre of pixel `(px, py)`.
    pub fn ray_direction(&self, px: usize, py: usize) -> Vector3<f64> {
        (self.pose.rotation() * self.intrinsics.camera_ray(px as f64, py as f64)).normalize()
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }
}
