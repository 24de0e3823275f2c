//! Camera model, Gaussian splatting and mesh rasterization.

pub mod camera;
pub mod raster;
pub mod splat;

pub use camera::Camera;
pub use raster::{rasterize_mesh, GBuffer, GPixel};
pub use splat::{project_all, project_gaussian, render, render_backward, render_f64, KernelGrads, Splat2D};

use crate::avatar::{AvatarModel, MeshPose};
use crate::error::Result;
use crate::image::ImageBuffer;

/// Poses `model`, projects it through `camera` and composites it.
pub fn render_avatar(model: &AvatarModel, pose: &MeshPose, camera: &Camera, background: [f64; 3]) -> Result<ImageBuffer> {
    let world = model.pose(pose)?;
    Ok(render(&project_all(&world, camera), camera, background))
}
