use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::is_orthonormal;

pub const DEFAULT_Z_NEAR: f64 = 0.01;

/// Pinhole camera. Pixel `(x, y)` samples the image plane at integer
/// coordinates `(x, y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub world_to_camera: Matrix4<f64>,
    pub z_near: f64,
}

/// On-disk / wire form: the view matrix as 16 row-major floats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraSpec {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub world_to_camera: Vec<f64>,
    #[serde(default = "default_z_near")]
    pub z_near: f64,
}

fn default_z_near() -> f64 {
    DEFAULT_Z_NEAR
}

impl Camera {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        world_to_camera: Matrix4<f64>,
    ) -> Result<Self> {
        let cam = Camera {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            world_to_camera,
            z_near: DEFAULT_Z_NEAR,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidArgument("camera focal lengths must be positive".into()));
        }
        if !is_orthonormal(&self.rotation(), 1e-6) || self.rotation().determinant() < 0.0 {
            return Err(Error::InvalidArgument("camera view matrix is not rigid".into()));
        }
        let last = self.world_to_camera.row(3);
        if last[0] != 0.0 || last[1] != 0.0 || last[2] != 0.0 || last[3] != 1.0 {
            return Err(Error::InvalidArgument("camera view matrix has a projective row".into()));
        }
        Ok(())
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.world_to_camera.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.world_to_camera.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// Camera at `eye` looking at `target`, +y of the image pointing along
    /// `-up` (image rows grow downwards).
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        fov_y: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let t = -(r * eye);
        let mut w = Matrix4::identity();
        w.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        w.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        let f = 0.5 * height as f64 / (0.5 * fov_y).tan();
        Camera::new(f, f, 0.5 * width as f64, 0.5 * height as f64, width, height, w)
    }

    pub fn to_spec(&self) -> CameraSpec {
        CameraSpec {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            width: self.width,
            height: self.height,
            world_to_camera: row_major(&self.world_to_camera),
            z_near: self.z_near,
        }
    }
}

impl TryFrom<CameraSpec> for Camera {
    type Error = Error;

    fn try_from(s: CameraSpec) -> Result<Self> {
        let w = matrix_from_row_major(&s.world_to_camera, "world_to_camera")?;
        let cam = Camera {
            fx: s.fx,
            fy: s.fy,
            cx: s.cx,
            cy: s.cy,
            width: s.width,
            height: s.height,
            world_to_camera: w,
            z_near: s.z_near,
        };
        cam.validate()?;
        Ok(cam)
    }
}

pub fn row_major(m: &Matrix4<f64>) -> Vec<f64> {
    (0..4).flat_map(|r| (0..4).map(move |c| m[(r, c)])).collect()
}

pub fn matrix_from_row_major(v: &[f64], what: &str) -> Result<Matrix4<f64>> {
    if v.len() != 16 {
        return Err(Error::mismatch(what, 16, v.len()));
    }
    Ok(Matrix4::from_row_slice(v))
}
