//! Masked fidelity, identity drift and cross-view consistency scores.

use std::fmt::Write as _;

use crate::avatar::{AvatarModel, MeshPose};
use crate::error::{Error, Result};
use crate::guidance::MaskSpec;
use crate::image::{ImageBuffer, Mask};
use crate::par;
use crate::render::{rasterize_mesh, render_avatar, Camera, GBuffer};
use crate::uv::{query_gbuffer, texel_index, UvTexture};

pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 7;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// First and second moments of one window of paired samples.
#[derive(Debug, Clone, Copy, Default)]
pub struct WindowStats {
    pub mean_a: f64,
    pub mean_b: f64,
    pub var_a: f64,
    pub var_b: f64,
    pub cov: f64,
}

impl WindowStats {
    pub fn from_pairs(pairs: impl Iterator<Item = (f64, f64)> + Clone) -> Self {
        let (mut sa, mut sb, mut n) = (0.0, 0.0, 0.0);
        for (a, b) in pairs.clone() {
            sa += a;
            sb += b;
            n += 1.0;
        }
        let (ma, mb) = (sa / n, sb / n);
        let (mut va, mut vb, mut cv) = (0.0, 0.0, 0.0);
        for (a, b) in pairs {
            va += (a - ma) * (a - ma);
            vb += (b - mb) * (b - mb);
            cv += (a - ma) * (b - mb);
        }
        Self {
            mean_a: ma,
            mean_b: mb,
            var_a: va / n,
            var_b: vb / n,
            cov: cv / n,
        }
    }

    pub fn ssim(&self) -> f64 {
        let num = (2.0 * self.mean_a * self.mean_b + SSIM_C1) * (2.0 * self.cov + SSIM_C2);
        let den = (self.mean_a.powi(2) + self.mean_b.powi(2) + SSIM_C1) * (self.var_a + self.var_b + SSIM_C2);
        num / den
    }

    /// Partial derivatives of SSIM with respect to `mean_b`, `var_b` and
    /// `cov`.
    pub fn ssim_partials(&self) -> (f64, f64, f64) {
        let a1 = 2.0 * self.mean_a * self.mean_b + SSIM_C1;
        let a2 = 2.0 * self.cov + SSIM_C2;
        let b1 = self.mean_a.powi(2) + self.mean_b.powi(2) + SSIM_C1;
        let b2 = self.var_a + self.var_b + SSIM_C2;
        let s = a1 * a2 / (b1 * b2);
        let d_mean = 2.0 * self.mean_a * a2 / (b1 * b2) - s * 2.0 * self.mean_b / b1;
        let d_var = -s / b2;
        let d_cov = 2.0 * a1 / (b1 * b2);
        (d_mean, d_var, d_cov)
    }
}

/// Top-left corners of all `SSIM_WINDOW`-sized windows lying entirely inside
/// `mask`.
pub fn interior_windows(mask: &Mask) -> Vec<(usize, usize)> {
    let (w, h) = mask.dims();
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Vec::new();
    }
    // summed-area table of the mask
    let mut sat = vec![0u32; (w + 1) * (h + 1)];
    for y in 0..h {
        for x in 0..w {
            sat[(y + 1) * (w + 1) + x + 1] =
                mask.data[y * w + x] as u32 + sat[y * (w + 1) + x + 1] + sat[(y + 1) * (w + 1) + x] - sat[y * (w + 1) + x];
        }
    }
    let full = (SSIM_WINDOW * SSIM_WINDOW) as u32;
    let mut out = Vec::new();
    for y in 0..=h - SSIM_WINDOW {
        for x in 0..=w - SSIM_WINDOW {
            let (x1, y1) = (x + SSIM_WINDOW, y + SSIM_WINDOW);
            let s = sat[y1 * (w + 1) + x1] + sat[y * (w + 1) + x] - sat[y * (w + 1) + x1] - sat[y1 * (w + 1) + x];
            if s == full {
                out.push((x, y));
            }
        }
    }
    out
}

fn window_pixels(width: usize, x: usize, y: usize) -> impl Iterator<Item = usize> + Clone {
    (y..y + SSIM_WINDOW).flat_map(move |yy| (x..x + SSIM_WINDOW).map(move |xx| yy * width + xx))
}

/// PSNR and SSIM of `b` against `a` over `mask`.
///
/// PSNR uses the per-channel MSE over masked pixels and is capped at
/// [`PSNR_CAP`]. SSIM averages 7×7 windows that lie entirely inside the mask;
/// if none fits, the masked pixels are treated as a single window.
pub fn masked_psnr_ssim(a: &ImageBuffer, b: &ImageBuffer, mask: &Mask) -> Result<(f64, f64)> {
    b.check_dims(a.dims())?;
    if mask.dims() != a.dims() {
        return Err(Error::DimensionMismatch {
            expected: a.dims(),
            actual: mask.dims(),
        });
    }
    let n = mask.count();
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    let mut se = 0.0;
    for (i, _) in mask.data.iter().enumerate().filter(|(_, &m)| m) {
        for c in 0..3 {
            let d = a.data[i][c] as f64 - b.data[i][c] as f64;
            se += d * d;
        }
    }
    let mse = se / (3 * n) as f64;
    let psnr = if mse > 0.0 {
        (10.0 * (1.0 / mse).log10()).clamp(0.0, PSNR_CAP)
    } else {
        PSNR_CAP
    };

    let windows = interior_windows(mask);
    let ssim = if windows.is_empty() {
        let idx: Vec<usize> = (0..mask.data.len()).filter(|&i| mask.data[i]).collect();
        (0..3)
            .map(|c| WindowStats::from_pairs(idx.iter().map(|&i| (a.data[i][c] as f64, b.data[i][c] as f64))).ssim())
            .sum::<f64>()
            / 3.0
    } else {
        let per_window = par::map_slice(&windows, |&(x, y)| {
            (0..3)
                .map(|c| {
                    WindowStats::from_pairs(
                        window_pixels(a.width, x, y).map(|i| (a.data[i][c] as f64, b.data[i][c] as f64)),
                    )
                    .ssim()
                })
                .sum::<f64>()
        });
        per_window.iter().sum::<f64>() / (3 * windows.len()) as f64
    };
    Ok((psnr, ssim.clamp(-1.0, 1.0)))
}

/// Mean L1 between two renders over covered pixels outside `mask`; zero when
/// that region is empty.
pub fn identity_drift(original: &ImageBuffer, edited: &ImageBuffer, mask: &Mask, coverage: &Mask) -> Result<f64> {
    edited.check_dims(original.dims())?;
    Ok(original.mean_abs_diff(edited, Some(&coverage.and_not(mask))).unwrap_or(0.0))
}

/// Spread of renders across views in UV space.
///
/// Each view's covered pixels are binned into texels of a `resolution`²
/// grid (optionally only pixels whose region label is in `region`) and
/// averaged per texel. For every texel seen by at least two views the sample
/// standard deviation of those per-view means is taken per channel and
/// averaged over channels; the score is the mean over such texels.
pub fn uv_consistency_from_views(
    views: &[(&ImageBuffer, &GBuffer)],
    resolution: usize,
    region: Option<&MaskSpec>,
) -> Result<f64> {
    let labels = region.map(MaskSpec::labels);
    let texels = resolution * resolution;
    let per_view = par::map_slice(views, |(img, gb)| -> Result<Vec<Option<[f64; 3]>>> {
        img.check_dims(gb.dims())?;
        let mut sum = vec![[0.0f64; 3]; texels];
        let mut n = vec![0u32; texels];
        for (px, g) in img.data.iter().zip(&gb.pixels) {
            if !g.is_covered() || labels.as_ref().is_some_and(|l| !l.contains(&g.region_label)) {
                continue;
            }
            let t = texel_index(resolution, g.uv);
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
    });
    let per_view = per_view.into_iter().collect::<Result<Vec<_>>>()?;

    let stds = par::map_range(texels, |t| {
        let mut means: Vec<[f64; 3]> = per_view.iter().filter_map(|v| v[t]).collect();
        if means.len() < 2 {
            return None;
        }
        // sorting makes the reduction independent of view order
        means.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        let k = means.len() as f64;
        let mut acc = 0.0;
        for c in 0..3 {
            let mu = means.iter().map(|m| m[c]).sum::<f64>() / k;
            let var = means.iter().map(|m| (m[c] - mu).powi(2)).sum::<f64>() / (k - 1.0);
            acc += var.sqrt();
        }
        Some(acc / 3.0)
    });
    let (sum, count) = stds.iter().flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if count == 0 {
        return Err(Error::InsufficientViews);
    }
    Ok(sum / count as f64)
}

/// Renders `model` for every pose and camera and scores the renders with
/// [`uv_consistency_from_views`].
pub fn uv_consistency(
    model: &AvatarModel,
    poses: &[MeshPose],
    cameras: &[Camera],
    resolution: usize,
    region: Option<&MaskSpec>,
    background: [f64; 3],
) -> Result<f64> {
    let mut rendered = Vec::with_capacity(poses.len() * cameras.len());
    for pose in poses {
        for cam in cameras {
            let img = render_avatar(model, pose, cam, background)?;
            let gb = rasterize_mesh(&model.mesh, pose, cam)?;
            rendered.push((img, gb));
        }
    }
    let views: Vec<(&ImageBuffer, &GBuffer)> = rendered.iter().map(|(i, g)| (i, g)).collect();
    uv_consistency_from_views(&views, resolution, region)
}

/// Scores `edited` against coherent texture guidance and against the
/// identity renders of `original` for every pose and camera. PSNR/SSIM are
/// taken over makeup pixels that the texture covers; views where no such
/// pixel is visible are left out. `consistency_resolution` adds the
/// [`uv_consistency`] of `edited` over the makeup regions.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    original: &AvatarModel,
    edited: &AvatarModel,
    texture: &UvTexture,
    poses: &[MeshPose],
    cameras: &[Camera],
    mask_spec: &MaskSpec,
    background: [f64; 3],
    consistency_resolution: Option<usize>,
) -> Result<EvalReport> {
    let labels = mask_spec.labels();
    let mut views = Vec::new();
    for pose in poses {
        for cam in cameras {
            let gb = rasterize_mesh(&edited.mesh, pose, cam)?;
            let render = render_avatar(edited, pose, cam, background)?;
            if !render.is_finite() {
                return Err(Error::Numerical(format!("non-finite render for {} / {}", pose.pose_id, cam.camera_id)));
            }
            let identity = render_avatar(original, pose, cam, background)?;
            let (guidance, valid) = query_gbuffer(texture, &gb, background)?;
            let mask = gb.label_mask(&labels);
            let region = mask.and(&valid);
            if region.count() == 0 {
                continue;
            }
            let (psnr, ssim) = masked_psnr_ssim(&guidance, &render, &region)?;
            views.push(ViewScore {
                pose_id: pose.pose_id.clone(),
                camera_id: cam.camera_id.clone(),
                psnr,
                ssim,
                drift: identity_drift(&identity, &render, &mask, &gb.coverage())?,
            });
        }
    }
    let uv_consistency = consistency_resolution
        .map(|res| uv_consistency(edited, poses, cameras, res, Some(mask_spec), background))
        .transpose()?;
    Ok(EvalReport { views, uv_consistency })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewScore {
    pub pose_id: String,
    pub camera_id: String,
    pub psnr: f64,
    pub ssim: f64,
    pub drift: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub views: Vec<ViewScore>,
    pub uv_consistency: Option<f64>,
}

impl EvalReport {
    /// Mean PSNR, SSIM and drift per pose, in first-seen pose order.
    pub fn per_pose(&self) -> Vec<(String, f64, f64, f64)> {
        let mut order: Vec<&str> = Vec::new();
        for v in &self.views {
            if !order.contains(&v.pose_id.as_str()) {
                order.push(&v.pose_id);
            }
        }
        order
            .into_iter()
            .map(|p| {
                let vs: Vec<&ViewScore> = self.views.iter().filter(|v| v.pose_id == p).collect();
                let n = vs.len() as f64;
                (
                    p.to_string(),
                    vs.iter().map(|v| v.psnr).sum::<f64>() / n,
                    vs.iter().map(|v| v.ssim).sum::<f64>() / n,
                    vs.iter().map(|v| v.drift).sum::<f64>() / n,
                )
            })
            .collect()
    }

    fn mean(&self, f: impl Fn(&ViewScore) -> f64) -> f64 {
        if self.views.is_empty() {
            return 0.0;
        }
        self.views.iter().map(f).sum::<f64>() / self.views.len() as f64
    }

    pub fn mean_psnr(&self) -> f64 {
        self.mean(|v| v.psnr)
    }

    pub fn mean_ssim(&self) -> f64 {
        self.mean(|v| v.ssim)
    }

    pub fn mean_drift(&self) -> f64 {
        self.mean(|v| v.drift)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<16} {:<12} {:>8} {:>8} {:>10}", "pose", "camera", "psnr", "ssim", "drift");
        for v in &self.views {
            let _ = writeln!(
                s,
                "{:<16} {:<12} {:>8.3} {:>8.4} {:>10.6}",
                v.pose_id, v.camera_id, v.psnr, v.ssim, v.drift
            );
        }
        let _ = writeln!(s);
        for (p, psnr, ssim, drift) in self.per_pose() {
            let _ = writeln!(s, "pose {p}: psnr {psnr:.3} ssim {ssim:.4} drift {drift:.6}");
        }
        let _ = writeln!(
            s,
            "mean: psnr {:.3} ssim {:.4} drift {:.6}",
            self.mean_psnr(),
            self.mean_ssim(),
            self.mean_drift()
        );
        if let Some(c) = self.uv_consistency {
            let _ = writeln!(s, "uv_consistency: {c:.6}");
        }
        s
    }

    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "mean_psnr={}", self.mean_psnr());
        let _ = writeln!(s, "mean_ssim={}", self.mean_ssim());
        let _ = writeln!(s, "mean_drift={}", self.mean_drift());
        if let Some(c) = self.uv_consistency {
            let _ = writeln!(s, "uv_consistency={c}");
        }
        for (p, psnr, ssim, drift) in self.per_pose() {
            let _ = writeln!(s, "pose.{p}.psnr={psnr}");
            let _ = writeln!(s, "pose.{p}.ssim={ssim}");
            let _ = writeln!(s, "pose.{p}.drift={drift}");
        }
        for v in &self.views {
            let key = format!("view.{}.{}", v.pose_id, v.camera_id);
            let _ = writeln!(s, "{key}.psnr={}", v.psnr);
            let _ = writeln!(s, "{key}.ssim={}", v.ssim);
            let _ = writeln!(s, "{key}.drift={}", v.drift);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::GPixel;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise_image(w: usize, h: usize, seed: u64) -> ImageBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = ImageBuffer::new(w, h, [0.0; 3]);
        for p in &mut img.data {
            *p = std::array::from_fn(|_| rng.random_range(0.2..0.8));
        }
        img
    }

    #[test]
    fn identical_images_hit_the_caps() {
        let a = noise_image(16, 16, 1);
        let (p, s) = masked_psnr_ssim(&a, &a, &Mask::new(16, 16, true)).unwrap();
        assert_eq!(p, PSNR_CAP);
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_offset_gives_20_db() {
        let a = noise_image(12, 12, 2);
        let mut b = a.clone();
        for p in &mut b.data {
            for c in p.iter_mut() {
                *c += 0.1;
            }
        }
        let (p, _) = masked_psnr_ssim(&a, &b, &Mask::new(12, 12, true)).unwrap();
        assert!((p - 20.0).abs() < 1e-4, "{p}");
    }

    #[test]
    fn empty_mask_is_an_error() {
        let a = noise_image(8, 8, 3);
        assert!(matches!(
            masked_psnr_ssim(&a, &a, &Mask::new(8, 8, false)),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn ssim_windows_stay_inside_mask() {
        let mut m = Mask::new(20, 20, false);
        for y in 2..12 {
            for x in 3..13 {
                m.data[y * 20 + x] = true;
            }
        }
        let w = interior_windows(&m);
        assert_eq!(w.len(), 4 * 4);
        assert!(w.iter().all(|&(x, y)| (3..=6).contains(&x) && (2..=5).contains(&y)));
        // differences outside the mask do not matter
        let a = noise_image(20, 20, 4);
        let mut b = a.clone();
        b.data[0] = [1.0; 3];
        assert_eq!(masked_psnr_ssim(&a, &b, &m).unwrap(), (PSNR_CAP, 1.0));
    }

    #[test]
    fn ssim_partials_match_finite_differences() {
        let st = WindowStats {
            mean_a: 0.4,
            mean_b: 0.35,
            var_a: 0.02,
            var_b: 0.03,
            cov: 0.01,
        };
        let (dm, dv, dc) = st.ssim_partials();
        let h = 1e-6;
        let f = |s: WindowStats| s.ssim();
        let num_m = (f(WindowStats { mean_b: 0.35 + h, ..st }) - f(WindowStats { mean_b: 0.35 - h, ..st })) / (2.0 * h);
        let num_v = (f(WindowStats { var_b: 0.03 + h, ..st }) - f(WindowStats { var_b: 0.03 - h, ..st })) / (2.0 * h);
        let num_c = (f(WindowStats { cov: 0.01 + h, ..st }) - f(WindowStats { cov: 0.01 - h, ..st })) / (2.0 * h);
        assert!((dm - num_m).abs() < 1e-6 && (dv - num_v).abs() < 1e-6 && (dc - num_c).abs() < 1e-6);
    }

    #[test]
    fn drift_matches_brute_force() {
        let a = noise_image(4, 4, 5);
        let b = noise_image(4, 4, 6);
        let mut mask = Mask::new(4, 4, false);
        mask.data[5] = true;
        let mut cov = Mask::new(4, 4, true);
        cov.data[0] = false;
        let mut sum = 0.0;
        let mut n = 0;
        for i in 0..16 {
            if i == 0 || i == 5 {
                continue;
            }
            for c in 0..3 {
                sum += (a.data[i][c] as f64 - b.data[i][c] as f64).abs();
            }
            n += 3;
        }
        assert!((identity_drift(&a, &b, &mask, &cov).unwrap() - sum / n as f64).abs() < 1e-12);
        assert_eq!(identity_drift(&a, &b, &Mask::new(4, 4, true), &cov).unwrap(), 0.0);
    }

    fn uv_gbuffer(w: usize, h: usize) -> GBuffer {
        GBuffer {
            width: w,
            height: h,
            pixels: (0..w * h)
                .map(|i| GPixel {
                    triangle: Some(0),
                    uv: [((i % w) as f64 + 0.5) / w as f64, ((i / w) as f64 + 0.5) / h as f64],
                    region_label: 1,
                    depth: 1.0,
                })
                .collect(),
        }
    }

    #[test]
    fn constant_views_are_perfectly_consistent() {
        let gb = uv_gbuffer(8, 8);
        let imgs: Vec<ImageBuffer> = (0..3).map(|_| ImageBuffer::new(8, 8, [0.3, 0.5, 0.1])).collect();
        let views: Vec<(&ImageBuffer, &GBuffer)> = imgs.iter().map(|i| (i, &gb)).collect();
        assert!(uv_consistency_from_views(&views, 8, None).unwrap() < 1e-12);
    }

    #[test]
    fn per_texel_noise_recovers_sigma() {
        let (res, sigma, n_views) = (16, 0.05, 24);
        let gb = uv_gbuffer(res, res);
        let normal = rand_distr::Normal::new(0.0, sigma).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let imgs: Vec<ImageBuffer> = (0..n_views)
            .map(|_| ImageBuffer::from_fn(res, res, |_, _| [0.5; 3]))
            .map(|mut img| {
                for p in &mut img.data {
                    for c in p.iter_mut() {
                        *c += rng.sample(normal) as f32;
                    }
                }
                img
            })
            .collect();
        let views: Vec<(&ImageBuffer, &GBuffer)> = imgs.iter().map(|i| (i, &gb)).collect();
        let got = uv_consistency_from_views(&views, res, None).unwrap();
        assert!((got - sigma).abs() < 0.15 * sigma, "{got}");

        let mut rev = views.clone();
        rev.reverse();
        assert_eq!(uv_consistency_from_views(&rev, res, None).unwrap(), got);
    }

    #[test]
    fn one_view_is_insufficient() {
        let gb = uv_gbuffer(4, 4);
        let img = ImageBuffer::new(4, 4, [0.5; 3]);
        assert!(matches!(
            uv_consistency_from_views(&[(&img, &gb)], 4, None),
            Err(Error::InsufficientViews)
        ));
    }

    #[test]
    fn report_key_values() {
        let r = EvalReport {
            views: vec![
                ViewScore { pose_id: "a".into(), camera_id: "c0".into(), psnr: 30.0, ssim: 0.9, drift: 0.01 },
                ViewScore { pose_id: "a".into(), camera_id: "c1".into(), psnr: 40.0, ssim: 0.8, drift: 0.03 },
            ],
            uv_consistency: Some(0.002),
        };
        let kv = r.to_key_values();
        assert!(kv.contains("mean_psnr=35\n"));
        assert!(kv.contains("pose.a.drift=0.02\n"));
        assert!(kv.contains("uv_consistency=0.002\n"));
        assert!(r.to_text().contains("uv_consistency"));
    }
}
