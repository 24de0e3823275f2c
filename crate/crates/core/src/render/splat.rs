//! Gaussian splat projection, front-to-back compositing and its backward pass.
//!
//! Per pixel, splats are visited in depth order and blended as
//!
//! ```text
//! C = Σ_i c_i α'_i Π_{j<i} (1 - α'_j) + background · Π_j (1 - α'_j)
//! α'_i = min(α_i · exp(-½ dᵀ Σ⁻¹ d), 0.999)
//! ```
//!
//! Contributions with `α' < 1/255` are skipped and a pixel stops once its
//! transmittance falls below `1e-4`. The backward pass treats those gates as
//! hard: skipped or clamped terms get no gradient.
//!
//! Splats are binned into 16×16 tiles after a global depth sort. A tile keeps
//! the global order, and each splat lands in every tile its opacity-aware
//! footprint touches, so the tiled result is bit-identical to visiting every
//! splat at every pixel.

use crate::avatar::{sigmoid, WorldGaussian};
use crate::image::ImageBuffer;
use crate::par;

use super::camera::Camera;

pub const NEAR_PLANE: f64 = 0.01;
pub const LOW_PASS: f64 = 0.3;
pub const ALPHA_MAX: f64 = 0.999;
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
pub const TRANSMITTANCE_MIN: f64 = 1e-4;
pub const TILE: usize = 16;

/// A Gaussian projected to the image plane.
#[derive(Debug, Clone, PartialEq)]
pub struct Splat2D {
    pub mean2d: [f64; 2],
    /// Symmetric 2×2 covariance as `[xx, xy, yy]`, in pixels².
    pub cov2d: [f64; 3],
    pub depth: f64,
    pub color: [f64; 3],
    pub opacity: f64,
    pub source_index: usize,
}

/// Gradients of a scalar loss with respect to per-kernel appearance.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelGrads {
    pub color: Vec<[f64; 3]>,
    pub opacity_logit: Vec<f64>,
}

impl KernelGrads {
    pub fn zeros(n: usize) -> Self {
        Self {
            color: vec![[0.0; 3]; n],
            opacity_logit: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.opacity_logit.len()
    }

    pub fn is_empty(&self) -> bool {
        self.opacity_logit.is_empty()
    }

    pub fn add_scaled(&mut self, other: &KernelGrads, s: f64) {
        for (a, b) in self.color.iter_mut().zip(&other.color) {
            for c in 0..3 {
                a[c] += s * b[c];
            }
        }
        for (a, b) in self.opacity_logit.iter_mut().zip(&other.opacity_logit) {
            *a += s * b;
        }
    }

    pub fn is_all_zero(&self) -> bool {
        self.color.iter().flatten().all(|&g| g == 0.0) && self.opacity_logit.iter().all(|&g| g == 0.0)
    }
}

/// Projects one world-space Gaussian. Returns `None` when it is behind the
/// near plane, has a degenerate footprint, or cannot reach any pixel.
pub fn project_gaussian(g: &WorldGaussian, camera: &Camera, source_index: usize) -> Option<Splat2D> {
    let w = camera.rotation();
    let pc = w * g.position + camera.translation();
    if !(pc.z > NEAR_PLANE) {
        return None;
    }
    let rot = g.rotation.to_rotation_matrix().into_inner();
    let s2 = g.scale.component_mul(&g.scale);
    let sigma = rot * nalgebra::Matrix3::from_diagonal(&s2) * rot.transpose();
    let sigma_cam = w * sigma * w.transpose();

    let (z, z2) = (pc.z, pc.z * pc.z);
    let j = nalgebra::Matrix2x3::new(
        camera.fx / z,
        0.0,
        -camera.fx * pc.x / z2,
        0.0,
        camera.fy / z,
        -camera.fy * pc.y / z2,
    );
    let cov = j * sigma_cam * j.transpose();
    let splat = Splat2D {
        mean2d: camera.project(&pc),
        cov2d: [cov[(0, 0)] + LOW_PASS, cov[(0, 1)], cov[(1, 1)] + LOW_PASS],
        depth: pc.z,
        color: g.color,
        opacity: sigmoid(g.opacity_logit),
        source_index,
    };
    Prepared::new(&splat)?.pixel_bounds(camera.width, camera.height)?;
    Some(splat)
}

/// Projects every Gaussian, preserving input order among survivors.
pub fn project_all(gaussians: &[WorldGaussian], camera: &Camera) -> Vec<Splat2D> {
    let projected = par::map_range(gaussians.len(), |i| project_gaussian(&gaussians[i], camera, i));
    projected.into_iter().flatten().collect()
}

/// Per-splat quantities the per-pixel loop needs.
#[derive(Debug, Clone, Copy)]
struct Prepared {
    mean: [f64; 2],
    conic: [f64; 3],
    opacity: f64,
    color: [f64; 3],
    /// Footprint half-width in pixels beyond which `α' < ALPHA_MIN`.
    radius: f64,
}

impl Prepared {
    fn new(s: &Splat2D) -> Option<Self> {
        let [a, b, c] = s.cov2d;
        let det = a * c - b * b;
        if !(det > 0.0 && a > 0.0) || !s.mean2d.iter().all(|v| v.is_finite()) {
            return None;
        }
        // α exp(-q/2) ≥ 1/255  ⇔  q ≤ 2 ln(255 α), and q ≥ |d|² / λ_max
        let reach = 2.0 * (s.opacity / ALPHA_MIN).ln();
        if !(reach > 0.0) {
            return None;
        }
        let mid = 0.5 * (a + c);
        let lambda_max = mid + (mid * mid - det).max(0.0).sqrt();
        Some(Self {
            mean: s.mean2d,
            conic: [c / det, -b / det, a / det],
            opacity: s.opacity,
            color: s.color,
            radius: (lambda_max * reach).sqrt() + 1.0,
        })
    }

    /// Inclusive pixel index bounds `[x0, x1, y0, y1]`, or `None` if off-image.
    fn pixel_bounds(&self, width: usize, height: usize) -> Option<[usize; 4]> {
        let lo_x = (self.mean[0] - self.radius - 0.5).ceil().max(0.0);
        let hi_x = (self.mean[0] + self.radius - 0.5).floor().min(width as f64 - 1.0);
        let lo_y = (self.mean[1] - self.radius - 0.5).ceil().max(0.0);
        let hi_y = (self.mean[1] + self.radius - 0.5).floor().min(height as f64 - 1.0);
        if lo_x > hi_x || lo_y > hi_y {
            return None;
        }
        Some([lo_x as usize, hi_x as usize, lo_y as usize, hi_y as usize])
    }

    /// `(α', gate)` at pixel center `(px, py)`, with `gate = dα'/dα` (zero when
    /// clamped). `None` means the contribution is skipped.
    #[inline]
    fn alpha_at(&self, px: f64, py: f64) -> Option<(f64, f64)> {
        let dx = px - self.mean[0];
        let dy = py - self.mean[1];
        let q = self.conic[0] * dx * dx + 2.0 * self.conic[1] * dx * dy + self.conic[2] * dy * dy;
        let falloff = (-0.5 * q).exp();
        let raw = self.opacity * falloff;
        if raw < ALPHA_MIN {
            return None;
        }
        if raw > ALPHA_MAX {
            Some((ALPHA_MAX, 0.0))
        } else {
            Some((raw, falloff))
        }
    }
}

/// Depth-sorted, tile-binned splats for one frame.
struct Frame {
    prepared: Vec<Prepared>,
    /// Source index per entry of `prepared`.
    sources: Vec<usize>,
    tiles_x: usize,
    /// Per tile: indices into `prepared`, front to back.
    bins: Vec<Vec<u32>>,
    width: usize,
    height: usize,
}

impl Frame {
    fn build(splats: &[Splat2D], width: usize, height: usize) -> Self {
        let mut order: Vec<usize> = (0..splats.len()).collect();
        order.sort_by(|&a, &b| {
            splats[a]
                .depth
                .total_cmp(&splats[b].depth)
                .then(splats[a].source_index.cmp(&splats[b].source_index))
        });
        let tiles_x = width.div_ceil(TILE);
        let tiles_y = height.div_ceil(TILE);
        let mut bins = vec![Vec::new(); tiles_x * tiles_y];
        let mut prepared = Vec::with_capacity(splats.len());
        let mut sources = Vec::with_capacity(splats.len());
        for &i in &order {
            let Some(p) = Prepared::new(&splats[i]) else {
                continue;
            };
            let Some([x0, x1, y0, y1]) = p.pixel_bounds(width, height) else {
                continue;
            };
            let id = prepared.len() as u32;
            prepared.push(p);
            sources.push(splats[i].source_index);
            for ty in y0 / TILE..=y1 / TILE {
                for tx in x0 / TILE..=x1 / TILE {
                    bins[ty * tiles_x + tx].push(id);
                }
            }
        }
        Self {
            prepared,
            sources,
            tiles_x,
            bins,
            width,
            height,
        }
    }

    fn tile_pixels(&self, tile: usize) -> impl Iterator<Item = (usize, usize)> {
        let (tx, ty) = (tile % self.tiles_x, tile / self.tiles_x);
        let x_end = ((tx + 1) * TILE).min(self.width);
        let y_end = ((ty + 1) * TILE).min(self.height);
        (ty * TILE..y_end).flat_map(move |y| (tx * TILE..x_end).map(move |x| (x, y)))
    }

    fn composite(&self, list: &[u32], x: usize, y: usize, background: &[f64; 3]) -> [f64; 3] {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        let mut t = 1.0;
        let mut out = [0.0; 3];
        for &id in list {
            let p = &self.prepared[id as usize];
            let Some((a, _)) = p.alpha_at(px, py) else {
                continue;
            };
            let w = a * t;
            for c in 0..3 {
                out[c] += p.color[c] * w;
            }
            t *= 1.0 - a;
            if t < TRANSMITTANCE_MIN {
                break;
            }
        }
        for c in 0..3 {
            out[c] += background[c] * t;
        }
        out
    }

    fn render(&self, background: &[f64; 3]) -> Vec<[f64; 3]> {
        let tiles = par::map_range(self.bins.len(), |tile| {
            let list = &self.bins[tile];
            self.tile_pixels(tile)
                .map(|(x, y)| self.composite(list, x, y, background))
                .collect::<Vec<_>>()
        });
        let mut out = vec![[0.0; 3]; self.width * self.height];
        for (tile, values) in tiles.into_iter().enumerate() {
            for ((x, y), v) in self.tile_pixels(tile).zip(values) {
                out[y * self.width + x] = v;
            }
        }
        out
    }

    /// Gradient contributions of one tile, indexed like the tile's bin list.
    fn tile_backward(
        &self,
        tile: usize,
        background: &[f64; 3],
        d_image: &[[f64; 3]],
    ) -> Vec<[f64; 4]> {
        struct Contribution {
            slot: usize,
            alpha: f64,
            gate: f64,
            t: f64,
        }

        let list = &self.bins[tile];
        let mut local = vec![[0.0f64; 4]; list.len()];
        let mut contribs: Vec<Contribution> = Vec::new();
        for (x, y) in self.tile_pixels(tile) {
            let dl = d_image[y * self.width + x];
            if dl == [0.0; 3] {
                continue;
            }
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            contribs.clear();
            let mut t = 1.0;
            for (slot, &id) in list.iter().enumerate() {
                let p = &self.prepared[id as usize];
                let Some((alpha, gate)) = p.alpha_at(px, py) else {
                    continue;
                };
                contribs.push(Contribution { slot, alpha, gate, t });
                t *= 1.0 - alpha;
                if t < TRANSMITTANCE_MIN {
                    break;
                }
            }
            // radiance arriving from behind the current splat, already
            // attenuated by everything in front of it
            let mut behind = background.map(|b| b * t);
            for c in contribs.iter().rev() {
                let p = &self.prepared[list[c.slot] as usize];
                let w = c.alpha * c.t;
                let g = &mut local[c.slot];
                let mut d_alpha = 0.0;
                for ch in 0..3 {
                    g[ch] += dl[ch] * w;
                    d_alpha += dl[ch] * (p.color[ch] * c.t - behind[ch] / (1.0 - c.alpha));
                    behind[ch] += p.color[ch] * w;
                }
                g[3] += d_alpha * c.gate * p.opacity * (1.0 - p.opacity);
            }
        }
        local
    }
}

/// Composites `splats` over `background` in double precision.
pub fn render_f64(splats: &[Splat2D], camera: &Camera, background: [f64; 3]) -> Vec<[f64; 3]> {
    Frame::build(splats, camera.width, camera.height).render(&background)
}

/// Composites `splats` over `background`.
pub fn render(splats: &[Splat2D], camera: &Camera, background: [f64; 3]) -> ImageBuffer {
    let data = render_f64(splats, camera, background)
        .into_iter()
        .map(|v| v.map(|c| c as f32))
        .collect();
    ImageBuffer {
        width: camera.width,
        height: camera.height,
        data,
    }
}

/// Gradients of a loss with respect to the colors and opacity logits of the
/// kernels behind `splats`, given `d_image = dL/dC` per pixel. Kernels are
/// addressed by `source_index`; `num_kernels` sizes the output.
///
/// Accumulation runs tile by tile and is merged in tile order, so results do
/// not depend on the worker count.
pub fn render_backward(
    splats: &[Splat2D],
    camera: &Camera,
    background: [f64; 3],
    d_image: &[[f64; 3]],
    num_kernels: usize,
) -> KernelGrads {
    assert_eq!(d_image.len(), camera.num_pixels(), "gradient image size");
    let frame = Frame::build(splats, camera.width, camera.height);
    let per_tile = par::map_range(frame.bins.len(), |tile| frame.tile_backward(tile, &background, d_image));
    let mut grads = KernelGrads::zeros(num_kernels);
    for (tile, local) in per_tile.into_iter().enumerate() {
        for (&id, g) in frame.bins[tile].iter().zip(local) {
            let k = frame.sources[id as usize];
            for c in 0..3 {
                grads.color[k][c] += g[c];
            }
            grads.opacity_logit[k] += g[3];
        }
    }
    grads
}
