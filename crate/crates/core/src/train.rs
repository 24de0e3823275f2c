//! Appearance optimization of a bound avatar with geometry held fixed.
//!
//! Both stages share one loop: pick a (pose, camera) pair, render, compare
//! against guidance inside the makeup mask and against the original avatar
//! outside it, backpropagate through the compositor and take an Adam step
//! on per-kernel color and opacity logit. The coarse stage reads guidance
//! from a baked UV texture (or, for ablations, straight from a provider);
//! the refine stage asks a provider to refine the current render.
//!
//! Renders, targets and losses are all kept in `f64` so that untouched
//! regions compare exactly equal to the identity render.

use std::num::NonZeroUsize;
use std::sync::Arc;

use lru::LruCache;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::avatar::{AvatarModel, GaussianKernel, MeshPose};
use crate::error::{Error, Result};
use crate::guidance::{sample_timestep, GuidanceProvider, GuidanceRequest, MaskSpec, Stage, ViewContext};
use crate::image::{ImageBuffer, Mask};
use crate::metrics::{WindowStats, SSIM_WINDOW};
use crate::render::splat::Splat2D;
use crate::render::{project_all, rasterize_mesh, render_backward, render_f64, Camera, GBuffer, KernelGrads};
use crate::uv::{query_gbuffer, UvTexture};

pub const OPACITY_LOGIT_BOUND: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Weight of the makeup (and perceptual) term.
    pub lambda1: f64,
    /// Weight of the restriction term.
    pub lambda2: f64,
    pub lr: f64,
    /// Learning rate reached at the last iteration of a stage, decaying
    /// log-linearly from `lr`. `None` keeps `lr` constant.
    pub lr_final: Option<f64>,
    pub coarse_iters: usize,
    pub refine_iters: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Weight of the SSIM stand-in inside the makeup term; 0 disables it.
    pub perceptual_weight: f64,
    pub background: [f64; 3],
    /// Number of (pose, camera) setups kept between iterations.
    pub view_cache: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda1: 10.0,
            lambda2: 10.0,
            lr: 1e-3,
            lr_final: None,
            coarse_iters: 10_000,
            refine_iters: 3_000,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            perceptual_weight: 0.0,
            background: [1.0; 3],
            view_cache: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidRequest(format!("train config: {what}")));
        for (name, w) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("perceptual_weight", self.perceptual_weight),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return bad(&format!("{name} must be a non-negative number"));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if let Some(f) = self.lr_final {
            if !(f > 0.0 && f.is_finite()) {
                return bad("lr_final must be positive");
            }
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive");
        }
        Ok(())
    }

    /// Learning rate at iteration `it` of a stage with `iters` iterations.
    pub fn lr_at(&self, it: usize, iters: usize) -> f64 {
        match self.lr_final {
            Some(f) if iters > 1 => {
                let t = it as f64 / (iters - 1) as f64;
                (self.lr.ln() * (1.0 - t) + f.ln() * t).exp()
            }
            _ => self.lr,
        }
    }

    pub fn adam(&self) -> AdamParams {
        AdamParams {
            lr: self.lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub makeup: f64,
    pub res: f64,
    /// Weighted perceptual contribution.
    pub perceptual: f64,
    pub total: f64,
}

pub fn total_loss(makeup: f64, res: f64, perceptual: f64, config: &TrainConfig) -> LossBreakdown {
    LossBreakdown {
        makeup,
        res,
        perceptual,
        total: config.lambda1 * (makeup + perceptual) + config.lambda2 * res,
    }
}

/// A scalar loss with its gradient with respect to the rendered image.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Vec<[f64; 3]>,
}

impl LossGrad {
    fn zero(n: usize) -> Self {
        Self {
            value: 0.0,
            grad: vec![[0.0; 3]; n],
        }
    }
}

/// Mean absolute per-channel error over `region`; zero with zero gradient
/// when the region is empty.
pub fn l1_loss(target: &[[f64; 3]], render: &[[f64; 3]], region: &Mask) -> Result<LossGrad> {
    check_len(target.len(), render.len(), region)?;
    let n = region.count();
    let mut out = LossGrad::zero(render.len());
    if n == 0 {
        return Ok(out);
    }
    let scale = 1.0 / (3 * n) as f64;
    let mut sum = 0.0;
    for i in (0..render.len()).filter(|&i| region.data[i]) {
        for c in 0..3 {
            let d = render[i][c] - target[i][c];
            sum += d.abs();
            out.grad[i][c] = if d > 0.0 {
                scale
            } else if d < 0.0 {
                -scale
            } else {
                0.0
            };
        }
    }
    out.value = sum * scale;
    Ok(out)
}

fn check_len(a: usize, b: usize, region: &Mask) -> Result<()> {
    let n = region.data.len();
    if a != n || b != n {
        return Err(Error::MismatchedInputs(format!(
            "image sizes {a} and {b} do not match mask size {n}"
        )));
    }
    Ok(())
}

/// `1 − SSIM` between the masked guidance and masked render, over all 7×7
/// windows of the mask's bounding box.
pub fn ssim_perceptual(guidance: &[[f64; 3]], render: &[[f64; 3]], mask: &Mask) -> Result<LossGrad> {
    check_len(guidance.len(), render.len(), mask)?;
    let mut out = LossGrad::zero(render.len());
    let w = mask.width;
    let Some((x0, y0, x1, y1)) = bounding_box(mask) else {
        return Ok(out);
    };
    if x1 - x0 < SSIM_WINDOW || y1 - y0 < SSIM_WINDOW {
        return Ok(out);
    }
    let m = |i: usize| if mask.data[i] { 1.0 } else { 0.0 };
    let windows: Vec<(usize, usize)> = (y0..=y1 - SSIM_WINDOW)
        .flat_map(|y| (x0..=x1 - SSIM_WINDOW).map(move |x| (x, y)))
        .collect();
    let count = (3 * windows.len()) as f64;
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut ssim_sum = 0.0;
    for &(x, y) in &windows {
        let idx = (y..y + SSIM_WINDOW).flat_map(|yy| (x..x + SSIM_WINDOW).map(move |xx| yy * w + xx));
        for c in 0..3 {
            let st = WindowStats::from_pairs(idx.clone().map(|i| (m(i) * guidance[i][c], m(i) * render[i][c])));
            ssim_sum += st.ssim();
            let (d_mean, d_var, d_cov) = st.ssim_partials();
            for i in idx.clone() {
                if !mask.data[i] {
                    continue;
                }
                let (a, b) = (guidance[i][c], render[i][c]);
                let d = d_mean / n + d_var * 2.0 * (b - st.mean_b) / n + d_cov * (a - st.mean_a) / n;
                out.grad[i][c] -= d / count;
            }
        }
    }
    out.value = 1.0 - ssim_sum / count;
    Ok(out)
}

fn bounding_box(mask: &Mask) -> Option<(usize, usize, usize, usize)> {
    let mut bb: Option<(usize, usize, usize, usize)> = None;
    for (i, _) in mask.data.iter().enumerate().filter(|(_, &b)| b) {
        let (x, y) = (i % mask.width, i / mask.width);
        bb = Some(match bb {
            None => (x, y, x + 1, y + 1),
            Some((a, b, c, d)) => (a.min(x), b.min(y), c.max(x + 1), d.max(y + 1)),
        });
    }
    bb
}

/// Makeup term: L1 inside `mask` plus the weighted perceptual stand-in.
#[derive(Debug, Clone, PartialEq)]
pub struct MakeupLoss {
    pub l1: f64,
    /// Already multiplied by the perceptual weight.
    pub perceptual: f64,
    pub grad: Vec<[f64; 3]>,
}

pub fn makeup_loss(guidance: &[[f64; 3]], render: &[[f64; 3]], mask: &Mask, perceptual_weight: f64) -> Result<MakeupLoss> {
    if mask.count() == 0 {
        log::debug!("makeup mask is empty; makeup loss is zero");
    }
    let l1 = l1_loss(guidance, render, mask)?;
    let mut out = MakeupLoss {
        l1: l1.value,
        perceptual: 0.0,
        grad: l1.grad,
    };
    if perceptual_weight > 0.0 {
        let p = ssim_perceptual(guidance, render, mask)?;
        out.perceptual = perceptual_weight * p.value;
        for (g, pg) in out.grad.iter_mut().zip(&p.grad) {
            for c in 0..3 {
                g[c] += perceptual_weight * pg[c];
            }
        }
    }
    Ok(out)
}

/// Identity-preservation term: L1 against the original render on covered
/// pixels outside `mask`.
pub fn restriction_loss(identity: &[[f64; 3]], render: &[[f64; 3]], mask: &Mask, coverage: &Mask) -> Result<LossGrad> {
    l1_loss(identity, render, &coverage.and_not(mask))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// Moment estimates for `[r, g, b, opacity_logit]` of every kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<[f64; 4]>,
    pub v: Vec<[f64; 4]>,
    pub step: u64,
}

impl AdamState {
    pub fn new(num_kernels: usize) -> Self {
        Self {
            m: vec![[0.0; 4]; num_kernels],
            v: vec![[0.0; 4]; num_kernels],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of kernel colors and opacity logits.
/// Colors are clamped to `[0, 1]` and logits to `±OPACITY_LOGIT_BOUND`.
pub fn adam_step(kernels: &mut [GaussianKernel], grads: &KernelGrads, state: &mut AdamState, params: &AdamParams) -> Result<()> {
    if grads.len() != kernels.len() || state.m.len() != kernels.len() || state.v.len() != kernels.len() {
        return Err(Error::MismatchedInputs(format!(
            "{} kernels, {} gradients, {} optimizer slots",
            kernels.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - params.beta1.powi(t);
    let c2 = 1.0 - params.beta2.powi(t);
    for (i, k) in kernels.iter_mut().enumerate() {
        let g = [grads.color[i][0], grads.color[i][1], grads.color[i][2], grads.opacity_logit[i]];
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let mut delta = [0.0; 4];
        for j in 0..4 {
            m[j] = params.beta1 * m[j] + (1.0 - params.beta1) * g[j];
            v[j] = params.beta2 * v[j] + (1.0 - params.beta2) * g[j] * g[j];
            delta[j] = params.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + params.eps);
        }
        for c in 0..3 {
            k.color[c] = (k.color[c] - delta[c]).clamp(0.0, 1.0);
        }
        k.opacity_logit = (k.opacity_logit - delta[3]).clamp(-OPACITY_LOGIT_BOUND, OPACITY_LOGIT_BOUND);
    }
    Ok(())
}

/// One record of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRecord {
    pub iteration: usize,
    pub stage: Stage,
    pub pose_id: String,
    pub camera_id: String,
    pub timestep: Option<u32>,
    pub loss: LossBreakdown,
}

/// Where coarse-stage guidance comes from.
#[derive(Clone, Copy)]
pub enum CoarseTarget<'a> {
    /// Coherent guidance queried from a baked texture.
    Texture(&'a UvTexture),
    /// Per-view guidance requested directly from a provider.
    Provider(&'a dyn GuidanceProvider),
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: AvatarModel,
    pub log: Vec<LogRecord>,
}

/// Everything fixed for one (pose, camera) pair.
struct ViewData {
    gbuffer: GBuffer,
    identity: Vec<[f64; 3]>,
    identity_image: ImageBuffer,
    /// Makeup pixels with valid guidance.
    mask: Mask,
    /// Mesh coverage minus makeup pixels that lack guidance.
    coverage: Mask,
    /// Projected kernels; colors and opacities are refreshed per iteration.
    splats: Vec<Splat2D>,
    guidance: Option<Vec<[f64; 3]>>,
}

/// Shared inputs of both stages. `original` is the unedited avatar that
/// provides geometry, identity renders and masks.
pub struct Trainer<'a> {
    pub original: &'a AvatarModel,
    pub poses: &'a [MeshPose],
    pub cameras: &'a [Camera],
    pub mask_spec: &'a MaskSpec,
    pub config: &'a TrainConfig,
}

pub type IterationHook<'h> = dyn FnMut(usize, &AvatarModel) -> Result<()> + 'h;

enum Target<'a> {
    Coarse(CoarseTarget<'a>),
    Refine(&'a dyn GuidanceProvider),
}

impl<'a> Trainer<'a> {
    fn check(&self, model: &AvatarModel) -> Result<()> {
        self.config.validate()?;
        if self.poses.is_empty() || self.cameras.is_empty() {
            return Err(Error::InvalidRequest("training needs at least one pose and one camera".into()));
        }
        if model.kernels.len() != self.original.kernels.len() || model.binding != self.original.binding {
            return Err(Error::MismatchedInputs("model and original avatar differ in kernels".into()));
        }
        Ok(())
    }

    pub fn coarse(&self, model: AvatarModel, target: CoarseTarget<'_>, hook: Option<&mut IterationHook<'_>>) -> Result<TrainOutcome> {
        self.check(&model)?;
        if let CoarseTarget::Texture(t) = target {
            if !t.is_finalized() {
                return Err(Error::UnfinalizedTexture);
            }
        }
        self.run(model, Stage::Coarse, self.config.coarse_iters, Target::Coarse(target), hook)
    }

    pub fn refine(&self, model: AvatarModel, provider: &dyn GuidanceProvider, hook: Option<&mut IterationHook<'_>>) -> Result<TrainOutcome> {
        self.check(&model)?;
        self.run(model, Stage::Refine, self.config.refine_iters, Target::Refine(provider), hook)
    }

    fn build_view(&self, pi: usize, ci: usize, target: &Target<'_>) -> Result<ViewData> {
        let (pose, cam) = (&self.poses[pi], &self.cameras[ci]);
        let bg = self.config.background;
        let gbuffer = rasterize_mesh(&self.original.mesh, pose, cam)?;
        let splats = project_all(&self.original.pose(pose)?, cam);
        let identity = image_precision(render_f64(&splats, cam, bg));
        let identity_image = ImageBuffer::from_f64(cam.width, cam.height, &identity);
        let makeup = gbuffer.label_mask(&self.mask_spec.labels());
        let mesh_coverage = gbuffer.coverage();
        let (guidance, valid) = match target {
            Target::Coarse(CoarseTarget::Texture(tex)) => {
                let (img, valid) = query_gbuffer(tex, &gbuffer, bg)?;
                (Some(img.to_f64()), valid)
            }
            Target::Coarse(CoarseTarget::Provider(p)) => {
                let request = GuidanceRequest::coarse(&pose.pose_id, &cam.camera_id);
                let view = ViewContext {
                    identity: &identity_image,
                    gbuffer: &gbuffer,
                };
                let img = p.provide(&request, &view)?;
                img.check_dims(gbuffer.dims())?;
                (Some(img.to_f64()), mesh_coverage.clone())
            }
            Target::Refine(_) => (None, mesh_coverage.clone()),
        };
        let mask = makeup.and(&valid);
        let coverage = mesh_coverage.and_not(&makeup.and_not(&valid));
        Ok(ViewData {
            gbuffer,
            identity,
            identity_image,
            mask,
            coverage,
            splats,
            guidance,
        })
    }

    fn run(
        &self,
        mut model: AvatarModel,
        stage: Stage,
        iters: usize,
        target: Target<'_>,
        mut hook: Option<&mut IterationHook<'_>>,
    ) -> Result<TrainOutcome> {
        let cfg = self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(stage as u64);
        let mut adam = AdamState::new(model.kernels.len());
        let mut adam_params = cfg.adam();
        let cap = NonZeroUsize::new(cfg.view_cache.max(1)).expect("non-zero");
        let mut cache: LruCache<(usize, usize), Arc<ViewData>> = LruCache::new(cap);
        let mut log = Vec::with_capacity(iters);
        let n = model.kernels.len();

        for it in 0..iters {
            let pi = rng.random_range(0..self.poses.len());
            let ci = rng.random_range(0..self.cameras.len());
            let view = match cache.get(&(pi, ci)) {
                Some(v) => Arc::clone(v),
                None => {
                    let v = Arc::new(self.build_view(pi, ci, &target)?);
                    cache.put((pi, ci), Arc::clone(&v));
                    v
                }
            };
            let cam = &self.cameras[ci];
            let pose = &self.poses[pi];

            let mut splats = view.splats.clone();
            for s in &mut splats {
                let k = &model.kernels[s.source_index];
                s.color = k.color;
                s.opacity = k.opacity();
            }
            let render = image_precision(render_f64(&splats, cam, cfg.background));

            let (guidance, timestep) = match &target {
                Target::Coarse(_) => (None, None),
                Target::Refine(provider) => {
                    let t = sample_timestep(&mut rng);
                    let base = ImageBuffer::from_f64(cam.width, cam.height, &render);
                    let request = GuidanceRequest::refine(&pose.pose_id, &cam.camera_id, t, &base);
                    let ctx = ViewContext {
                        identity: &view.identity_image,
                        gbuffer: &view.gbuffer,
                    };
                    let img = crate::guidance::refine(*provider, &request, &ctx)?;
                    img.check_dims(view.gbuffer.dims())?;
                    (Some(img.to_f64()), Some(t))
                }
            };
            let guidance = guidance
                .as_deref()
                .or(view.guidance.as_deref())
                .expect("guidance for every stage");

            let makeup = makeup_loss(guidance, &render, &view.mask, cfg.perceptual_weight)?;
            let res = restriction_loss(&view.identity, &render, &view.mask, &view.coverage)?;
            let loss = total_loss(makeup.l1, res.value, makeup.perceptual, cfg);
            if !loss.total.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss at {stage} iteration {it} (pose {}, camera {})",
                    pose.pose_id, cam.camera_id
                )));
            }

            let d_image: Vec<[f64; 3]> = makeup
                .grad
                .iter()
                .zip(&res.grad)
                .map(|(a, b)| [0, 1, 2].map(|c| cfg.lambda1 * a[c] + cfg.lambda2 * b[c]))
                .collect();
            let grads = render_backward(&splats, cam, cfg.background, &d_image, n);
            if !grads.color.iter().flatten().chain(&grads.opacity_logit).all(|g| g.is_finite()) {
                return Err(Error::Numerical(format!("non-finite gradient at {stage} iteration {it}")));
            }
            adam_params.lr = cfg.lr_at(it, iters);
            adam_step(&mut model.kernels, &grads, &mut adam, &adam_params)?;

            log.push(LogRecord {
                iteration: it,
                stage,
                pose_id: pose.pose_id.clone(),
                camera_id: cam.camera_id.clone(),
                timestep,
                loss,
            });
            if let Some(h) = hook.as_mut() {
                h(it + 1, &model)?;
            }
        }
        Ok(TrainOutcome { model, log })
    }
}

/// Rounds a render to the precision of stored images so that residuals
/// against guidance images vanish when the two agree as images.
fn image_precision(mut img: Vec<[f64; 3]>) -> Vec<[f64; 3]> {
    for p in &mut img {
        *p = p.map(|v| v as f32 as f64);
    }
    img
}

/// Coarse stage against a baked texture, using `model` as the original.
pub fn run_coarse(
    model: &AvatarModel,
    texture: &UvTexture,
    poses: &[MeshPose],
    cameras: &[Camera],
    mask_spec: &MaskSpec,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let trainer = Trainer {
        original: model,
        poses,
        cameras,
        mask_spec,
        config,
    };
    trainer.coarse(model.clone(), CoarseTarget::Texture(texture), None)
}

/// Refine stage starting from `model`; `original` supplies identity renders.
pub fn run_refine(
    model: &AvatarModel,
    original: &AvatarModel,
    provider: &dyn GuidanceProvider,
    poses: &[MeshPose],
    cameras: &[Camera],
    mask_spec: &MaskSpec,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let trainer = Trainer {
        original,
        poses,
        cameras,
        mask_spec,
        config,
    };
    trainer.refine(model.clone(), provider, None)
}

/// Mean absolute change of colors and opacity logits between two models
/// with the same kernels.
pub fn appearance_change(a: &AvatarModel, b: &AvatarModel) -> f64 {
    let mut sum = 0.0;
    for (ka, kb) in a.kernels.iter().zip(&b.kernels) {
        for c in 0..3 {
            sum += (ka.color[c] - kb.color[c]).abs();
        }
        sum += (ka.opacity_logit - kb.opacity_logit).abs();
    }
    sum / (4 * a.kernels.len().max(1)) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::UnitQuaternion;
    use rand::Rng;

    fn rand_image(n: usize, rng: &mut impl Rng) -> Vec<[f64; 3]> {
        (0..n).map(|_| std::array::from_fn(|_| rng.random_range(0.0..1.0))).collect()
    }

    #[test]
    fn l1_of_equal_images_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_image(16, &mut rng);
        let m = Mask::new(4, 4, true);
        let l = makeup_loss(&a, &a, &m, 0.0).unwrap();
        assert_eq!(l.l1, 0.0);
        assert!(l.grad.iter().flatten().all(|&g| g == 0.0));
    }

    #[test]
    fn single_pixel_makeup_loss() {
        let mut g = vec![[0.5; 3]; 4];
        let r = vec![[0.5; 3]; 4];
        g[2][0] = 0.7;
        let mut m = Mask::new(2, 2, false);
        m.data[2] = true;
        let l = makeup_loss(&g, &r, &m, 0.0).unwrap();
        assert!((l.l1 - 0.2 / 3.0).abs() < 1e-12);
        assert_eq!(l.grad[2], [-1.0 / 3.0, 0.0, 0.0]);
        assert!(l.grad.iter().enumerate().all(|(i, g)| i == 2 || *g == [0.0; 3]));
    }

    #[test]
    fn empty_mask_gives_zero_loss_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (a, b) = (rand_image(9, &mut rng), rand_image(9, &mut rng));
        let l = makeup_loss(&a, &b, &Mask::new(3, 3, false), 1.0).unwrap();
        assert_eq!((l.l1, l.perceptual), (0.0, 0.0));
        assert!(l.grad.iter().flatten().all(|&g| g == 0.0));
    }

    #[test]
    fn restriction_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (id, r) = (rand_image(16, &mut rng), rand_image(16, &mut rng));
        let mut m = Mask::new(4, 4, false);
        let mut cov = Mask::new(4, 4, true);
        for i in 0..16 {
            m.data[i] = rng.random_bool(0.3);
            cov.data[i] = rng.random_bool(0.8);
        }
        let l = restriction_loss(&id, &r, &m, &cov).unwrap();
        let (mut sum, mut n) = (0.0, 0);
        for i in 0..16 {
            if cov.data[i] && !m.data[i] {
                for c in 0..3 {
                    sum += (id[i][c] - r[i][c]).abs();
                }
                n += 3;
            }
        }
        assert!((l.value - sum / n as f64).abs() < 1e-15);
        for i in 0..16 {
            if m.data[i] || !cov.data[i] {
                assert_eq!(l.grad[i], [0.0; 3]);
            }
        }
        assert_eq!(restriction_loss(&id, &id, &m, &cov).unwrap().value, 0.0);
        assert_eq!(restriction_loss(&id, &r, &Mask::new(4, 4, true), &cov).unwrap().value, 0.0);
    }

    #[test]
    fn total_loss_algebra() {
        let cfg = TrainConfig::default();
        assert_eq!(total_loss(0.0, 0.0, 0.0, &cfg).total, 0.0);
        assert!((total_loss(0.1, 0.2, 0.0, &cfg).total - 3.0).abs() < 1e-15);
        let doubled = TrainConfig { lambda1: 20.0, ..cfg.clone() };
        let (a, b) = (total_loss(0.1, 0.0, 0.0, &cfg), total_loss(0.1, 0.0, 0.0, &doubled));
        assert_eq!(b.total, 2.0 * a.total);
        let no_res = TrainConfig { lambda2: 0.0, ..cfg };
        assert_eq!(total_loss(0.1, 0.0, 0.0, &no_res).total, total_loss(0.1, 5.0, 0.0, &no_res).total);
    }

    #[test]
    fn perceptual_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (w, h) = (10, 9);
        let g = rand_image(w * h, &mut rng);
        let r = rand_image(w * h, &mut rng);
        let mut m = Mask::new(w, h, false);
        for y in 1..9 {
            for x in 1..9 {
                m.data[y * w + x] = (x + y) % 5 != 0;
            }
        }
        let l = ssim_perceptual(&g, &r, &m).unwrap();
        let eps = 1e-6;
        for i in [11usize, 23, 45, 67, 78] {
            for c in 0..3 {
                let mut rp = r.clone();
                rp[i][c] += eps;
                let mut rm = r.clone();
                rm[i][c] -= eps;
                let num = (ssim_perceptual(&g, &rp, &m).unwrap().value - ssim_perceptual(&g, &rm, &m).unwrap().value) / (2.0 * eps);
                assert!((num - l.grad[i][c]).abs() < 1e-7, "pixel {i} channel {c}: {num} vs {}", l.grad[i][c]);
            }
        }
        assert!(l.grad[0] == [0.0; 3]);
    }

    fn kernels(n: usize) -> Vec<GaussianKernel> {
        (0..n)
            .map(|i| GaussianKernel {
                mu_local: Default::default(),
                q_local: UnitQuaternion::identity(),
                s_local: nalgebra::Vector3::repeat(0.1),
                color: [0.5, 0.4, 0.3 + 0.01 * i as f64],
                opacity_logit: 0.5,
            })
            .collect()
    }

    #[test]
    fn learning_rate_decays_log_linearly() {
        let cfg = TrainConfig {
            lr: 0.1,
            lr_final: Some(0.001),
            ..TrainConfig::default()
        };
        assert!((cfg.lr_at(0, 101) - 0.1).abs() < 1e-15);
        assert!((cfg.lr_at(50, 101) - 0.01).abs() < 1e-12);
        assert!((cfg.lr_at(100, 101) - 0.001).abs() < 1e-15);
        assert_eq!(cfg.lr_at(0, 1), 0.1);
        let constant = TrainConfig::default();
        assert_eq!(constant.lr_at(7, 10), constant.lr);
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut ks = kernels(3);
        let before = ks.clone();
        let mut st = AdamState::new(3);
        adam_step(&mut ks, &KernelGrads::zeros(3), &mut st, &TrainConfig::default().adam()).unwrap();
        assert_eq!(ks, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_first_step_closed_form() {
        let p = TrainConfig::default().adam();
        for g in [0.3, -2.0, 1e-3] {
            let mut ks = kernels(2);
            let before = ks.clone();
            let mut grads = KernelGrads::zeros(2);
            grads.color[0] = [g; 3];
            grads.color[1] = [g; 3];
            grads.opacity_logit = vec![g, g];
            let mut st = AdamState::new(2);
            adam_step(&mut ks, &grads, &mut st, &p).unwrap();
            // bias-corrected moments reduce to g and g², so the step is
            // lr·g / (|g| + eps)
            let want = p.lr * g / (g.abs() + p.eps);
            for c in 0..3 {
                assert!(((before[0].color[c] - ks[0].color[c]) - want).abs() < 1e-15);
            }
            assert!(((before[0].opacity_logit - ks[0].opacity_logit) - want).abs() < 1e-15);
            assert_eq!(before[0].color[0] - ks[0].color[0], before[1].color[0] - ks[1].color[0]);
        }
    }

    #[test]
    fn adam_clamps() {
        let mut ks = kernels(1);
        ks[0].color = [0.0, 1.0, 0.5];
        ks[0].opacity_logit = OPACITY_LOGIT_BOUND;
        let mut grads = KernelGrads::zeros(1);
        grads.color[0] = [1.0, -1.0, 0.0];
        grads.opacity_logit[0] = -1.0;
        let mut st = AdamState::new(1);
        adam_step(&mut ks, &grads, &mut st, &TrainConfig::default().adam()).unwrap();
        assert_eq!(ks[0].color, [0.0, 1.0, 0.5]);
        assert_eq!(ks[0].opacity_logit, OPACITY_LOGIT_BOUND);
    }
}
