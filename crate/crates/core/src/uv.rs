//! Coherent UV supervision: bake several canonical-pose guidance images into
//! one global UV texture, then render guidance for any pose and camera by
//! looking that texture up through the mesh rasterizer.
//!
//! A pixel with interpolated UV `(u, v)` belongs to texel
//! `(⌊u·res⌋, ⌊v·res⌋)`. Each view first averages the pixels that fall into
//! a texel; the texel is then the mean of those per-view means over all views
//! that saw it. Texels nobody saw are grown from their neighbours for a few
//! dilation steps and otherwise stay empty.

use std::path::{Path, PathBuf};

use crate::avatar::{MeshPose, TriangleMesh};
use crate::error::{Error, Result};
use crate::image::{ImageBuffer, Mask, Pfm};
use crate::par;
use crate::render::{rasterize_mesh, Camera, GBuffer};

pub const DEFAULT_RESOLUTION: usize = 256;
pub const DEFAULT_VIEWS: usize = 16;
pub const DEFAULT_DILATION: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct BakeConfig {
    pub resolution: usize,
    pub num_views: usize,
    pub canonical_pose_id: String,
    pub cameras: Vec<String>,
    pub dilation_iters: usize,
}

impl BakeConfig {
    pub fn new(canonical_pose_id: impl Into<String>, cameras: Vec<String>) -> Self {
        Self {
            resolution: DEFAULT_RESOLUTION,
            num_views: cameras.len(),
            canonical_pose_id: canonical_pose_id.into(),
            cameras,
            dilation_iters: DEFAULT_DILATION,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_views == 0 || self.num_views != self.cameras.len() {
            return Err(Error::MismatchedInputs(format!(
                "bake expects {} views but lists {} cameras",
                self.num_views,
                self.cameras.len()
            )));
        }
        if self.resolution == 0 {
            return Err(Error::MismatchedInputs("texture resolution must be positive".into()));
        }
        Ok(())
    }
}

/// One guidance image together with the g-buffer of the same camera at the
/// canonical pose.
#[derive(Debug, Clone, Copy)]
pub struct BakeView<'a> {
    pub camera_id: &'a str,
    pub image: &'a ImageBuffer,
    pub gbuffer: &'a GBuffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UvTexture {
    pub resolution: usize,
    /// Sum of per-view texel means.
    pub rgb_sum: Vec<[f64; 3]>,
    /// Number of views that observed each texel.
    pub count: Vec<u32>,
    /// Set by [`UvTexture::finalize`]; `None` texels were never filled.
    pub finalized: Option<Vec<Option<[f64; 3]>>>,
}

impl UvTexture {
    pub fn new(resolution: usize) -> Self {
        let n = resolution * resolution;
        Self {
            resolution,
            rgb_sum: vec![[0.0; 3]; n],
            count: vec![0; n],
            finalized: None,
        }
    }

    /// Texture with every texel observed once at `color`.
    pub fn uniform(resolution: usize, color: [f64; 3]) -> Self {
        let n = resolution * resolution;
        Self {
            resolution,
            rgb_sum: vec![color; n],
            count: vec![1; n],
            finalized: Some(vec![Some(color); n]),
        }
    }

    #[inline]
    pub fn texel_of(&self, uv: [f64; 2]) -> usize {
        texel_index(self.resolution, uv)
    }

    pub fn is_observed(&self, texel: usize) -> bool {
        self.count[texel] > 0
    }

    pub fn observed_count(&self) -> usize {
        self.count.iter().filter(|&&c| c > 0).count()
    }

    /// Folds one view's per-texel means into the accumulators.
    pub fn add_view(&mut self, image: &ImageBuffer, gbuffer: &GBuffer) -> Result<()> {
        let means = view_means(self.resolution, image, gbuffer)?;
        self.merge_view(&means);
        Ok(())
    }

    fn merge_view(&mut self, means: &[Option<[f64; 3]>]) {
        for (t, m) in means.iter().enumerate() {
            if let Some(m) = m {
                for c in 0..3 {
                    self.rgb_sum[t][c] += m[c];
                }
                self.count[t] += 1;
            }
        }
        self.finalized = None;
    }

    /// Computes texel means and fills holes by `dilation_iters` rounds of
    /// 8-neighbour averaging.
    pub fn finalize(&mut self, dilation_iters: usize) {
        let mut tex: Vec<Option<[f64; 3]>> = self
            .rgb_sum
            .iter()
            .zip(&self.count)
            .map(|(s, &n)| (n > 0).then(|| s.map(|v| v / n as f64)))
            .collect();
        let res = self.resolution;
        for _ in 0..dilation_iters {
            let prev = &tex;
            let rows: Vec<Vec<Option<[f64; 3]>>> = par::map_range(res, |y| {
                (0..res)
                    .map(|x| prev[y * res + x].or_else(|| neighbour_mean(prev, res, x, y)))
                    .collect()
            });
            let next: Vec<Option<[f64; 3]>> = rows.into_iter().flatten().collect();
            if next == tex {
                break;
            }
            tex = next;
        }
        self.finalized = Some(tex);
    }

    pub fn is_finalized(&self) -> bool {
        self.finalized.is_some()
    }

    fn texels(&self) -> Result<&[Option<[f64; 3]>]> {
        self.finalized.as_deref().ok_or(Error::UnfinalizedTexture)
    }

    /// Bilinear lookup with texel centers at `(i + 0.5) / res`. Empty texels
    /// drop out of the stencil; `None` if all four are empty.
    pub fn sample_bilinear(&self, uv: [f64; 2]) -> Result<Option<[f64; 3]>> {
        let tex = self.texels()?;
        Ok(bilinear(tex, self.resolution, uv))
    }

    /// Writes the finalized colors to `path` (PFM) and the per-texel view
    /// counts to `path.count.pfm`, with -1 marking dilation-filled texels.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tex = self.texels()?;
        let res = self.resolution;
        Pfm {
            width: res,
            height: res,
            channels: 3,
            data: tex.iter().flat_map(|t| t.unwrap_or([0.0; 3]).map(|v| v as f32)).collect(),
        }
        .save(path)?;
        Pfm {
            width: res,
            height: res,
            channels: 1,
            data: tex
                .iter()
                .zip(&self.count)
                .map(|(t, &n)| match (t, n) {
                    (_, n) if n > 0 => n as f32,
                    (Some(_), _) => -1.0,
                    (None, _) => 0.0,
                })
                .collect(),
        }
        .save(count_path(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let rgb = Pfm::load(path)?;
        let counts = Pfm::load(count_path(path))?;
        if rgb.channels != 3 || counts.channels != 1 || rgb.width != rgb.height || counts.width != rgb.width || counts.height != rgb.height {
            return Err(Error::format("uv texture", path, "color and count maps disagree"));
        }
        let res = rgb.width;
        let mut tex = Self::new(res);
        let mut fin = vec![None; res * res];
        for t in 0..res * res {
            let c = [rgb.data[3 * t], rgb.data[3 * t + 1], rgb.data[3 * t + 2]].map(f64::from);
            let n = counts.data[t];
            if n > 0.0 {
                tex.count[t] = n as u32;
                tex.rgb_sum[t] = c.map(|v| v * n as f64);
                fin[t] = Some(c);
            } else if n < 0.0 {
                fin[t] = Some(c);
            }
        }
        tex.finalized = Some(fin);
        Ok(tex)
    }

    /// Finalized texture as an image, empty texels in `empty`. Row `r` holds
    /// texels with `⌊v·res⌋ = r`.
    pub fn to_image(&self, empty: [f32; 3]) -> Result<ImageBuffer> {
        let tex = self.texels()?;
        Ok(ImageBuffer {
            width: self.resolution,
            height: self.resolution,
            data: tex.iter().map(|t| t.map_or(empty, |c| c.map(|v| v as f32))).collect(),
        })
    }
}

fn count_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".count.pfm");
    PathBuf::from(s)
}

#[inline]
pub fn texel_index(res: usize, uv: [f64; 2]) -> usize {
    let bin = |v: f64| ((v * res as f64).floor().max(0.0) as usize).min(res - 1);
    bin(uv[1]) * res + bin(uv[0])
}

fn neighbour_mean(tex: &[Option<[f64; 3]>], res: usize, x: usize, y: usize) -> Option<[f64; 3]> {
    let mut sum = [0.0; 3];
    let mut n = 0;
    for dy in -1i64..=1 {
        for dx in -1i64..=1 {
            if dx == 0 && dy == 0 {
                continue;
            }
            let (nx, ny) = (x as i64 + dx, y as i64 + dy);
            if nx < 0 || ny < 0 || nx >= res as i64 || ny >= res as i64 {
                continue;
            }
            if let Some(c) = tex[ny as usize * res + nx as usize] {
                for i in 0..3 {
                    sum[i] += c[i];
                }
                n += 1;
            }
        }
    }
    (n > 0).then(|| sum.map(|v| v / n as f64))
}

fn bilinear(tex: &[Option<[f64; 3]>], res: usize, uv: [f64; 2]) -> Option<[f64; 3]> {
    let coord = |v: f64| {
        let x = v * res as f64 - 0.5;
        let x0 = x.floor();
        let f = x - x0;
        let i0 = (x0.max(0.0) as usize).min(res - 1);
        let i1 = ((x0 + 1.0).max(0.0) as usize).min(res - 1);
        (i0, i1, f)
    };
    let (x0, x1, fx) = coord(uv[0]);
    let (y0, y1, fy) = coord(uv[1]);
    let taps = [
        (tex[y0 * res + x0], (1.0 - fx) * (1.0 - fy)),
        (tex[y0 * res + x1], fx * (1.0 - fy)),
        (tex[y1 * res + x0], (1.0 - fx) * fy),
        (tex[y1 * res + x1], fx * fy),
    ];
    if let [(Some(a), _), (Some(b), _), (Some(c), _), (Some(d), _)] = taps {
        // lerp form keeps constant neighbourhoods exact
        let mut out = [0.0; 3];
        for i in 0..3 {
            let top = a[i] + (b[i] - a[i]) * fx;
            let bottom = c[i] + (d[i] - c[i]) * fx;
            out[i] = top + (bottom - top) * fy;
        }
        return Some(out);
    }
    let mut sum = [0.0; 3];
    let mut wsum = 0.0;
    for (t, w) in taps {
        if let Some(c) = t {
            for i in 0..3 {
                sum[i] += w * c[i];
            }
            wsum += w;
        }
    }
    if taps.iter().all(|(t, _)| t.is_none()) {
        return None;
    }
    if wsum <= 0.0 {
        // only zero-weight taps are filled; fall back to their plain mean
        let filled: Vec<[f64; 3]> = taps.iter().filter_map(|(t, _)| *t).collect();
        let n = filled.len() as f64;
        return Some([0, 1, 2].map(|i| filled.iter().map(|c| c[i]).sum::<f64>() / n));
    }
    Some(sum.map(|v| v / wsum))
}

/// Per-texel mean of one view's covered pixels.
fn view_means(res: usize, image: &ImageBuffer, gbuffer: &GBuffer) -> Result<Vec<Option<[f64; 3]>>> {
    image.check_dims(gbuffer.dims())?;
    let mut sum = vec![[0.0f64; 3]; res * res];
    let mut n = vec![0u32; res * res];
    for (px, g) in image.data.iter().zip(&gbuffer.pixels) {
        if !g.is_covered() {
            continue;
        }
        let t = texel_index(res, g.uv);
        for c in 0..3 {
            sum[t][c] += px[c] as f64;
        }
        n[t] += 1;
    }
    Ok(sum
        .into_iter()
        .zip(n)
        .map(|(s, k)| (k > 0).then(|| s.map(|v| v / k as f64)))
        .collect())
}

/// Bakes guidance views into a finalized texture.
///
/// Views are folded in ascending `camera_id` order, so the result does not
/// depend on the order they are passed in.
pub fn bake(views: &[BakeView<'_>], config: &BakeConfig) -> Result<UvTexture> {
    config.validate()?;
    if views.len() != config.num_views {
        return Err(Error::MismatchedInputs(format!(
            "{} views supplied, {} configured",
            views.len(),
            config.num_views
        )));
    }
    let mut order: Vec<&BakeView<'_>> = views.iter().collect();
    order.sort_by(|a, b| a.camera_id.cmp(b.camera_id));
    if order.windows(2).any(|w| w[0].camera_id == w[1].camera_id) {
        return Err(Error::MismatchedInputs("duplicate camera in bake views".into()));
    }
    for v in &order {
        v.image.check_dims(v.gbuffer.dims()).map_err(|e| {
            Error::MismatchedInputs(format!("view `{}`: {e}", v.camera_id))
        })?;
    }
    let res = config.resolution;
    let per_view = par::map_slice(&order, |v| view_means(res, v.image, v.gbuffer));
    let mut tex = UvTexture::new(res);
    for means in per_view {
        tex.merge_view(&means?);
    }
    tex.finalize(config.dilation_iters);
    Ok(tex)
}

/// Looks the texture up through an existing g-buffer. Returns the guidance
/// image and the mask of pixels that received a texture value.
pub fn query_gbuffer(texture: &UvTexture, gbuffer: &GBuffer, background: [f64; 3]) -> Result<(ImageBuffer, Mask)> {
    let tex = texture.texels()?;
    let res = texture.resolution;
    let bg = background.map(|v| v as f32);
    let samples = par::map_slice(&gbuffer.pixels, |g| {
        g.is_covered()
            .then(|| bilinear(tex, res, g.uv))
            .flatten()
    });
    let image = ImageBuffer {
        width: gbuffer.width,
        height: gbuffer.height,
        data: samples.iter().map(|s| s.map_or(bg, |c| c.map(|v| v as f32))).collect(),
    };
    let coverage = Mask {
        width: gbuffer.width,
        height: gbuffer.height,
        data: samples.iter().map(Option::is_some).collect(),
    };
    Ok((image, coverage))
}

/// Renders coherent guidance for `pose` seen from `camera`.
pub fn query(
    texture: &UvTexture,
    mesh: &TriangleMesh,
    pose: &MeshPose,
    camera: &Camera,
    background: [f64; 3],
) -> Result<(ImageBuffer, Mask)> {
    if !texture.is_finalized() {
        return Err(Error::UnfinalizedTexture);
    }
    let gbuffer = rasterize_mesh(mesh, pose, camera)?;
    query_gbuffer(texture, &gbuffer, background)
}

/// A dense square RGB texture without holes.
#[derive(Debug, Clone, PartialEq)]
pub struct TextureMap {
    pub resolution: usize,
    pub data: Vec<[f64; 3]>,
}

impl TextureMap {
    pub fn from_fn(resolution: usize, f: impl Fn(usize, usize) -> [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(resolution * resolution);
        for y in 0..resolution {
            for x in 0..resolution {
                data.push(f(x, y));
            }
        }
        Self { resolution, data }
    }

    pub fn sample_nearest(&self, uv: [f64; 2]) -> [f64; 3] {
        self.data[texel_index(self.resolution, uv)]
    }

    pub fn sample_bilinear(&self, uv: [f64; 2]) -> [f64; 3] {
        bilinear_dense(&self.data, self.resolution, uv)
    }
}

fn bilinear_dense(data: &[[f64; 3]], res: usize, uv: [f64; 2]) -> [f64; 3] {
    let coord = |v: f64| {
        let x = v * res as f64 - 0.5;
        let x0 = x.floor();
        let i0 = (x0.max(0.0) as usize).min(res - 1);
        let i1 = ((x0 + 1.0).max(0.0) as usize).min(res - 1);
        (i0, i1, x - x0)
    };
    let (x0, x1, fx) = coord(uv[0]);
    let (y0, y1, fy) = coord(uv[1]);
    let (a, b, c, d) = (data[y0 * res + x0], data[y0 * res + x1], data[y1 * res + x0], data[y1 * res + x1]);
    [0, 1, 2].map(|i| {
        let top = a[i] + (b[i] - a[i]) * fx;
        let bottom = c[i] + (d[i] - c[i]) * fx;
        top + (bottom - top) * fy
    })
}

/// Shades every covered g-buffer pixel with `shade(uv)`; background elsewhere.
pub fn shade_gbuffer(gbuffer: &GBuffer, background: [f64; 3], shade: impl Fn([f64; 2]) -> [f64; 3] + Sync + Send) -> ImageBuffer {
    let data = par::map_slice(&gbuffer.pixels, |g| {
        let c = if g.is_covered() { shade(g.uv) } else { background };
        c.map(|v| v as f32)
    });
    ImageBuffer {
        width: gbuffer.width,
        height: gbuffer.height,
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::GPixel;

    fn gbuffer_with(uvs: &[Option<[f64; 2]>], width: usize) -> GBuffer {
        GBuffer {
            width,
            height: uvs.len() / width,
            pixels: uvs
                .iter()
                .map(|uv| match uv {
                    Some(uv) => GPixel {
                        triangle: Some(0),
                        uv: *uv,
                        region_label: 0,
                        depth: 1.0,
                    },
                    None => GPixel::EMPTY,
                })
                .collect(),
        }
    }

    #[test]
    fn single_gray_view_fills_observed_texels() {
        let uvs: Vec<Option<[f64; 2]>> = (0..16).map(|i| (i % 3 != 0).then(|| [0.1 + 0.01 * i as f64, 0.05])).collect();
        let gb = gbuffer_with(&uvs, 4);
        let img = ImageBuffer::new(4, 4, [0.4; 3]);
        let mut cfg = BakeConfig::new("neutral", vec!["a".into()]);
        cfg.resolution = 64;
        cfg.dilation_iters = 1;
        let tex = bake(&[BakeView { camera_id: "a", image: &img, gbuffer: &gb }], &cfg).unwrap();
        let fin = tex.finalized.as_ref().unwrap();
        for t in 0..64 * 64 {
            if tex.is_observed(t) {
                assert_eq!(fin[t], Some([0.4f32 as f64; 3]));
            }
        }
        // far from any observation: still empty after one dilation step
        assert_eq!(fin[texel_index(64, [0.9, 0.9])], None);
        assert!(tex.observed_count() > 0);
    }

    #[test]
    fn two_views_average_per_view_means() {
        let (a, b) = (0.2f32, 0.7f32);
        let uv = [0.5, 0.5];
        let gb = gbuffer_with(&[Some(uv); 6], 3);
        let ia = ImageBuffer::new(3, 2, [a; 3]);
        let ib = ImageBuffer::new(3, 2, [b; 3]);
        let mut cfg = BakeConfig::new("n", vec!["a".into(), "b".into()]);
        cfg.resolution = 8;
        let tex = bake(
            &[
                BakeView { camera_id: "a", image: &ia, gbuffer: &gb },
                BakeView { camera_id: "b", image: &ib, gbuffer: &gb },
            ],
            &cfg,
        )
        .unwrap();
        let t = texel_index(8, uv);
        let got = tex.finalized.as_ref().unwrap()[t].unwrap();
        let want = (a as f64 + b as f64) / 2.0;
        assert!(got.iter().all(|&v| (v - want).abs() < 1e-15));
        assert_eq!(tex.count[t], 2);
        assert_eq!(tex.rgb_sum[t][0] / 2.0, got[0]);
    }

    #[test]
    fn unequal_pixel_counts_weight_views_equally() {
        // view a contributes 1 pixel of 0, view b 5 pixels of 1: mean of
        // means is 1/2, not the flat pixel mean 5/6
        let uv = Some([0.3, 0.3]);
        let ga = gbuffer_with(&[uv, None, None, None, None, None], 6);
        let gbb = gbuffer_with(&[uv, uv, uv, uv, uv, None], 6);
        let ia = ImageBuffer::new(6, 1, [0.0; 3]);
        let ib = ImageBuffer::new(6, 1, [1.0; 3]);
        let mut cfg = BakeConfig::new("n", vec!["a".into(), "b".into()]);
        cfg.resolution = 4;
        let tex = bake(
            &[
                BakeView { camera_id: "a", image: &ia, gbuffer: &ga },
                BakeView { camera_id: "b", image: &ib, gbuffer: &gbb },
            ],
            &cfg,
        )
        .unwrap();
        assert_eq!(tex.finalized.unwrap()[texel_index(4, [0.3, 0.3])], Some([0.5; 3]));
    }

    #[test]
    fn mismatched_inputs_rejected() {
        let gb = gbuffer_with(&[None; 4], 2);
        let img = ImageBuffer::new(4, 1, [0.0; 3]);
        let cfg = BakeConfig::new("n", vec!["a".into()]);
        let r = bake(&[BakeView { camera_id: "a", image: &img, gbuffer: &gb }], &cfg);
        assert!(matches!(r, Err(Error::MismatchedInputs(_))));
        let img = ImageBuffer::new(2, 2, [0.0; 3]);
        let cfg2 = BakeConfig::new("n", vec!["a".into(), "b".into()]);
        let r = bake(&[BakeView { camera_id: "a", image: &img, gbuffer: &gb }], &cfg2);
        assert!(matches!(r, Err(Error::MismatchedInputs(_))));
    }

    #[test]
    fn unfinalized_texture_cannot_be_queried() {
        let tex = UvTexture::new(4);
        let gb = gbuffer_with(&[Some([0.5, 0.5])], 1);
        assert!(matches!(query_gbuffer(&tex, &gb, [1.0; 3]), Err(Error::UnfinalizedTexture)));
        assert!(matches!(tex.sample_bilinear([0.5, 0.5]), Err(Error::UnfinalizedTexture)));
    }

    #[test]
    fn uniform_texture_samples_exactly() {
        let c = [0.3, 0.55, 0.9];
        let tex = UvTexture::uniform(16, c);
        for i in 0..50 {
            let uv = [i as f64 / 49.0, (i * 7 % 50) as f64 / 49.0];
            assert_eq!(tex.sample_bilinear(uv).unwrap(), Some(c));
        }
    }

    #[test]
    fn bilinear_skips_empty_taps_and_flags_holes() {
        let mut tex = UvTexture::new(4);
        tex.rgb_sum[0] = [1.0; 3];
        tex.count[0] = 1;
        tex.finalize(0);
        // between texel 0 and its empty neighbours: only the filled tap counts
        assert_eq!(tex.sample_bilinear([0.25, 0.25]).unwrap(), Some([1.0; 3]));
        assert_eq!(tex.sample_bilinear([0.9, 0.9]).unwrap(), None);
    }

    #[test]
    fn dilation_grows_one_ring_per_step() {
        let mut tex = UvTexture::new(9);
        tex.rgb_sum[4 * 9 + 4] = [0.5; 3];
        tex.count[4 * 9 + 4] = 1;
        let mut one = tex.clone();
        one.finalize(1);
        let filled = one.finalized.as_ref().unwrap().iter().filter(|t| t.is_some()).count();
        assert_eq!(filled, 9);
        tex.finalize(8);
        assert!(tex.finalized.unwrap().iter().all(|t| *t == Some([0.5; 3])));
    }

    #[test]
    fn save_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut tex = UvTexture::new(8);
        for t in [3usize, 10, 40] {
            tex.rgb_sum[t] = [0.25 * 2.0, 0.5 * 2.0, 0.125 * 2.0];
            tex.count[t] = 2;
        }
        tex.finalize(1);
        let p = dir.path().join("tex.pfm");
        tex.save(&p).unwrap();
        let back = UvTexture::load(&p).unwrap();
        assert_eq!(back.count, tex.count);
        assert_eq!(back.finalized, tex.finalized.map(|f| f.into_iter().map(|t| t.map(|c| c.map(|v| v as f32 as f64))).collect()));
    }
}
