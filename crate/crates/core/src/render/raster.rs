//! Z-buffered triangle rasterization into a UV / region g-buffer.

use crate::avatar::{MeshPose, TriangleMesh, Vec3};
use crate::error::Result;
use crate::image::Mask;
use crate::par;

use super::camera::Camera;
use super::splat::NEAR_PLANE;

const BAND_ROWS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GPixel {
    pub triangle: Option<u32>,
    /// Perspective-correct UV; meaningful only when `triangle` is set.
    pub uv: [f64; 2],
    pub region_label: u32,
    /// Camera-space z of the visible surface, `+inf` when empty.
    pub depth: f64,
}

impl GPixel {
    pub const EMPTY: GPixel = GPixel {
        triangle: None,
        uv: [0.0; 2],
        region_label: 0,
        depth: f64::INFINITY,
    };

    pub fn is_covered(&self) -> bool {
        self.triangle.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GBuffer {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<GPixel>,
}

impl GBuffer {
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn coverage(&self) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            data: self.pixels.iter().map(GPixel::is_covered).collect(),
        }
    }

    /// Covered pixels whose region label is in `labels`.
    pub fn label_mask(&self, labels: &[u32]) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            data: self
                .pixels
                .iter()
                .map(|p| p.is_covered() && labels.contains(&p.region_label))
                .collect(),
        }
    }
}

/// Screen-space setup of one front-facing triangle.
struct ScreenTriangle {
    index: u32,
    screen: [[f64; 2]; 3],
    inv_z: [f64; 3],
    area: f64,
    rows: [usize; 2],
    cols: [usize; 2],
}

#[inline]
fn edge(a: &[f64; 2], b: &[f64; 2], p: &[f64; 2]) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

fn setup(mesh: &TriangleMesh, cam_space: &[Vec3], camera: &Camera, t: usize) -> Option<ScreenTriangle> {
    let [a, b, c] = mesh.corners(t, cam_space);
    if a.z <= NEAR_PLANE || b.z <= NEAR_PLANE || c.z <= NEAR_PLANE {
        // no near-plane clipping; such triangles are dropped
        return None;
    }
    let normal = (b - a).cross(&(c - a));
    if normal.dot(&a) >= 0.0 {
        return None;
    }
    let screen = [camera.project(&a), camera.project(&b), camera.project(&c)];
    let area = edge(&screen[0], &screen[1], &screen[2]);
    if area == 0.0 || !area.is_finite() {
        return None;
    }
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for s in &screen {
        for i in 0..2 {
            lo[i] = lo[i].min(s[i]);
            hi[i] = hi[i].max(s[i]);
        }
    }
    // pixel centers inside the bounding box
    let x0 = (lo[0] - 0.5).ceil().max(0.0);
    let x1 = (hi[0] - 0.5).floor().min(camera.width as f64 - 1.0);
    let y0 = (lo[1] - 0.5).ceil().max(0.0);
    let y1 = (hi[1] - 0.5).floor().min(camera.height as f64 - 1.0);
    if x0 > x1 || y0 > y1 {
        return None;
    }
    Some(ScreenTriangle {
        index: t as u32,
        screen,
        inv_z: [1.0 / a.z, 1.0 / b.z, 1.0 / c.z],
        area,
        rows: [y0 as usize, y1 as usize],
        cols: [x0 as usize, x1 as usize],
    })
}

/// Rasterizes `mesh` under `pose` into a g-buffer. Back-facing triangles and
/// triangles crossing the near plane are discarded; at equal depth the lower
/// triangle index wins.
pub fn rasterize_mesh(mesh: &TriangleMesh, pose: &MeshPose, camera: &Camera) -> Result<GBuffer> {
    let mut pixels = vec![GPixel::EMPTY; camera.num_pixels()];
    if mesh.triangles.is_empty() {
        return Ok(GBuffer {
            width: camera.width,
            height: camera.height,
            pixels,
        });
    }
    pose.validate(mesh)?;
    let cam_space: Vec<Vec3> = pose.vertex_positions.iter().map(|p| camera.to_camera(p)).collect();
    let tris: Vec<ScreenTriangle> = par::map_range(mesh.triangles.len(), |t| setup(mesh, &cam_space, camera, t))
        .into_iter()
        .flatten()
        .collect();

    let width = camera.width;
    par::for_each_chunk_mut(&mut pixels, BAND_ROWS * width, |band, chunk| {
        let row0 = band * BAND_ROWS;
        let row1 = row0 + chunk.len() / width - 1;
        for tri in &tris {
            if tri.rows[1] < row0 || tri.rows[0] > row1 {
                continue;
            }
            let uvs = &mesh.uv_corners[tri.index as usize];
            let label = mesh.region_labels[tri.index as usize];
            for y in tri.rows[0].max(row0)..=tri.rows[1].min(row1) {
                for x in tri.cols[0]..=tri.cols[1] {
                    let p = [x as f64 + 0.5, y as f64 + 0.5];
                    let s = &tri.screen;
                    let b = [
                        edge(&s[1], &s[2], &p) / tri.area,
                        edge(&s[2], &s[0], &p) / tri.area,
                        edge(&s[0], &s[1], &p) / tri.area,
                    ];
                    if b.iter().any(|&w| w < 0.0) {
                        continue;
                    }
                    let q = [b[0] * tri.inv_z[0], b[1] * tri.inv_z[1], b[2] * tri.inv_z[2]];
                    let sum = q[0] + q[1] + q[2];
                    let depth = 1.0 / sum;
                    let slot = &mut chunk[(y - row0) * width + x];
                    if !(depth < slot.depth) {
                        continue;
                    }
                    let mut uv = [0.0; 2];
                    for i in 0..2 {
                        uv[i] = ((q[0] * uvs[0][i] + q[1] * uvs[1][i] + q[2] * uvs[2][i]) / sum).clamp(0.0, 1.0);
                    }
                    *slot = GPixel {
                        triangle: Some(tri.index),
                        uv,
                        region_label: label,
                        depth,
                    };
                }
            }
        }
    });
    Ok(GBuffer {
        width: camera.width,
        height: camera.height,
        pixels,
    })
}
