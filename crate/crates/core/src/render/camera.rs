use nalgebra::{Matrix3, Matrix4, Vector3};

use crate::avatar::Vec3;
use crate::error::{Error, Result};

/// Pinhole camera. Camera space is x right, y down, z forward; pixel `(x, y)`
/// is sampled at its center `(x + 0.5, y + 0.5)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub camera_id: String,
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub world_to_camera: Matrix4<f64>,
}

impl Camera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        camera_id: impl Into<String>,
        width: usize,
        height: usize,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        world_to_camera: Matrix4<f64>,
    ) -> Result<Self> {
        let cam = Self {
            camera_id: camera_id.into(),
            width,
            height,
            fx,
            fy,
            cx,
            cy,
            world_to_camera,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |r: String| Err(Error::InvalidCamera(format!("{}: {r}", self.camera_id)));
        if self.width == 0 || self.height == 0 {
            return bad("zero-sized image".into());
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return bad(format!("focal lengths must be positive ({}, {})", self.fx, self.fy));
        }
        let r = self.rotation();
        let err = (r * r.transpose() - Matrix3::identity()).amax();
        if !(err <= 1e-6) {
            return bad(format!("rotation block is not orthonormal (error {err:e})"));
        }
        if (r.determinant() - 1.0).abs() > 1e-6 {
            return bad("rotation block is not a proper rotation".into());
        }
        let last = self.world_to_camera.row(3);
        if last[0] != 0.0 || last[1] != 0.0 || last[2] != 0.0 || last[3] != 1.0 {
            return bad("bottom row must be [0 0 0 1]".into());
        }
        Ok(())
    }

    /// A camera at `eye` looking at `target`, world +y up.
    pub fn look_at(
        camera_id: impl Into<String>,
        width: usize,
        height: usize,
        focal: f64,
        eye: Vec3,
        target: Vec3,
    ) -> Result<Self> {
        let forward = (target - eye).normalize();
        let right = forward.cross(&Vector3::y()).normalize();
        let down = forward.cross(&right);
        let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let t = -(r * eye);
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        Self::new(
            camera_id,
            width,
            height,
            focal,
            focal,
            width as f64 / 2.0,
            height as f64 / 2.0,
            m,
        )
    }

    /// A camera on a circle around `target`. Azimuth 0 looks from +z toward
    /// -z; positive azimuth moves the camera toward +x.
    #[allow(clippy::too_many_arguments)]
    pub fn orbit(
        camera_id: impl Into<String>,
        width: usize,
        height: usize,
        focal: f64,
        distance: f64,
        azimuth_deg: f64,
        elevation_deg: f64,
        target: Vec3,
    ) -> Result<Self> {
        let (az, el) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
        let eye = target + distance * Vec3::new(el.cos() * az.sin(), el.sin(), el.cos() * az.cos());
        Self::look_at(camera_id, width, height, focal, eye, target)
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.world_to_camera.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vec3 {
        self.world_to_camera.fixed_view::<3, 1>(0, 3).into_owned()
    }

    #[inline]
    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation() * p + self.translation()
    }

    /// Pixel coordinates of a camera-space point.
    #[inline]
    pub fn project(&self, pc: &Vec3) -> [f64; 2] {
        [self.fx * pc.x / pc.z + self.cx, self.fy * pc.y / pc.z + self.cy]
    }

    /// Same camera rendering at a different resolution.
    pub fn with_resolution(&self, width: usize, height: usize) -> Camera {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Camera {
            camera_id: self.camera_id.clone(),
            width,
            height,
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: self.cx * sx,
            cy: self.cy * sy,
            world_to_camera: self.world_to_camera,
        }
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }
}
