//! Supervision sources: makeup masks, identity pairing, and providers of
//! guidance images.
//!
//! Providers sit behind [`GuidanceProvider`]. [`FileProvider`] serves images
//! generated offline and listed in a manifest; [`ProceduralProvider`] blends
//! per-region overlay colors into an identity render and doubles as the
//! refinement stub; [`PerViewProvider`] does the same but perturbs every view
//! independently, mimicking a generator that does not agree with itself
//! across viewpoints.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::num::NonZeroUsize;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use lru::LruCache;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::avatar::{AvatarModel, MeshPose, TriangleMesh};
use crate::error::{Error, Result};
use crate::image::{ImageBuffer, Mask};
use crate::render::{rasterize_mesh, render_avatar, Camera, GBuffer};
use crate::uv::TextureMap;

/// Refinement timesteps are drawn from the integer grid `T_MIN..=T_MAX`.
pub const T_MIN: u32 = 20;
pub const T_MAX: u32 = 400;

/// Refinement must not move non-mask pixels by more than this mean L1.
pub const REFINE_TOLERANCE: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    Coarse,
    Refine,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Coarse => "coarse",
            Stage::Refine => "refine",
        })
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coarse" => Ok(Stage::Coarse),
            "refine" => Ok(Stage::Refine),
            other => Err(Error::InvalidRequest(format!("unknown stage `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GuidanceRequest<'a> {
    pub pose_id: String,
    pub camera_id: String,
    pub stage: Stage,
    pub timestep: Option<u32>,
    /// Current render of the avatar being refined.
    pub base_render: Option<&'a ImageBuffer>,
}

impl<'a> GuidanceRequest<'a> {
    pub fn coarse(pose_id: impl Into<String>, camera_id: impl Into<String>) -> Self {
        Self {
            pose_id: pose_id.into(),
            camera_id: camera_id.into(),
            stage: Stage::Coarse,
            timestep: None,
            base_render: None,
        }
    }

    pub fn refine(
        pose_id: impl Into<String>,
        camera_id: impl Into<String>,
        timestep: u32,
        base_render: &'a ImageBuffer,
    ) -> Self {
        Self {
            pose_id: pose_id.into(),
            camera_id: camera_id.into(),
            stage: Stage::Refine,
            timestep: Some(timestep),
            base_render: Some(base_render),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage == Stage::Refine {
            match self.timestep {
                Some(t) if (T_MIN..=T_MAX).contains(&t) => {}
                Some(t) => {
                    return Err(Error::InvalidRequest(format!(
                        "timestep {t} outside [{T_MIN}, {T_MAX}]"
                    )))
                }
                None => return Err(Error::InvalidRequest("refine request without timestep".into())),
            }
            if self.base_render.is_none() {
                return Err(Error::InvalidRequest("refine request without base render".into()));
            }
        }
        Ok(())
    }
}

/// Uniform sampler over the refinement timestep grid.
pub fn sample_timestep(rng: &mut impl Rng) -> u32 {
    rng.random_range(T_MIN..=T_MAX)
}

/// What a provider may look at besides the request: the identity render of
/// the original avatar and the g-buffer for the same pose and camera.
#[derive(Debug, Clone, Copy)]
pub struct ViewContext<'a> {
    pub identity: &'a ImageBuffer,
    pub gbuffer: &'a GBuffer,
}

pub trait GuidanceProvider: Send + Sync {
    fn provide(&self, request: &GuidanceRequest<'_>, view: &ViewContext<'_>) -> Result<ImageBuffer>;
}

/// One supervision tuple for the trainer.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceSample {
    pub guidance: ImageBuffer,
    pub mask: Mask,
    pub identity: ImageBuffer,
    /// Pixels where guidance is defined.
    pub coverage: Mask,
}

impl GuidanceSample {
    pub fn validate(&self) -> Result<()> {
        let dims = self.guidance.dims();
        self.identity.check_dims(dims)?;
        for m in [&self.mask, &self.coverage] {
            if m.dims() != dims {
                return Err(Error::DimensionMismatch {
                    expected: dims,
                    actual: m.dims(),
                });
            }
        }
        if !self.mask.is_subset_of(&self.coverage) {
            return Err(Error::MismatchedInputs("mask extends outside coverage".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MaskSpec {
    pub makeup_labels: BTreeSet<u32>,
}

impl MaskSpec {
    pub fn new(labels: impl IntoIterator<Item = u32>) -> Self {
        Self {
            makeup_labels: labels.into_iter().collect(),
        }
    }

    pub fn labels(&self) -> Vec<u32> {
        self.makeup_labels.iter().copied().collect()
    }
}

pub fn mask_from_gbuffer(gbuffer: &GBuffer, spec: &MaskSpec) -> Mask {
    gbuffer.label_mask(&spec.labels())
}

/// Makeup mask, identity render and g-buffer for one pose and camera.
#[derive(Debug, Clone)]
pub struct MaskedView {
    pub mask: Mask,
    pub identity: ImageBuffer,
    pub gbuffer: GBuffer,
}

/// Rasterizes the mesh for the mask and renders the frozen original avatar
/// for the identity image.
pub fn make_mask(
    original: &AvatarModel,
    pose: &MeshPose,
    camera: &Camera,
    spec: &MaskSpec,
    background: [f64; 3],
) -> Result<MaskedView> {
    let gbuffer = rasterize_mesh(&original.mesh, pose, camera)?;
    let identity = render_avatar(original, pose, camera, background)?;
    Ok(MaskedView {
        mask: mask_from_gbuffer(&gbuffer, spec),
        identity,
        gbuffer,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionOverlay {
    pub color: [f64; 3],
    /// Blend weight of the overlay in `[0, 1]`.
    pub beta: f64,
    /// Optional UV-space pattern replacing the flat color.
    pub pattern: Option<TextureMap>,
}

impl RegionOverlay {
    pub fn flat(color: [f64; 3], beta: f64) -> Self {
        Self {
            color,
            beta,
            pattern: None,
        }
    }

    #[inline]
    fn color_at(&self, uv: [f64; 2]) -> [f64; 3] {
        match &self.pattern {
            Some(p) => p.sample_bilinear(uv),
            None => self.color,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ProceduralMakeupSpec {
    pub overlays: BTreeMap<u32, RegionOverlay>,
}

impl ProceduralMakeupSpec {
    pub fn new(overlays: impl IntoIterator<Item = (u32, RegionOverlay)>) -> Self {
        Self {
            overlays: overlays.into_iter().collect(),
        }
    }

    pub fn validate(&self, mesh: Option<&TriangleMesh>) -> Result<()> {
        for (label, o) in &self.overlays {
            if !(0.0..=1.0).contains(&o.beta) {
                return Err(Error::InvalidRequest(format!("overlay {label}: beta {} outside [0, 1]", o.beta)));
            }
            if let Some(mesh) = mesh {
                if !mesh.region_labels.contains(label) {
                    return Err(Error::InvalidRequest(format!("overlay label {label} does not occur in the mesh")));
                }
            }
        }
        Ok(())
    }

    /// Labels carrying an overlay, as a mask spec.
    pub fn mask_spec(&self) -> MaskSpec {
        MaskSpec::new(self.overlays.keys().copied())
    }
}

/// Blends overlays into `base` wherever the g-buffer shows a labelled region.
pub fn provide_procedural(spec: &ProceduralMakeupSpec, base: &ImageBuffer, gbuffer: &GBuffer) -> Result<ImageBuffer> {
    base.check_dims(gbuffer.dims())?;
    let mut out = base.clone();
    for (px, g) in out.data.iter_mut().zip(&gbuffer.pixels) {
        if !g.is_covered() {
            continue;
        }
        if let Some(o) = spec.overlays.get(&g.region_label) {
            *px = blend(px, &o.color_at(g.uv), o.beta);
        }
    }
    Ok(out)
}

#[inline]
fn blend(base: &[f32; 3], overlay: &[f64; 3], beta: f64) -> [f32; 3] {
    if beta == 0.0 {
        return *base;
    }
    [0, 1, 2].map(|c| ((1.0 - beta) * base[c] as f64 + beta * overlay[c]) as f32)
}

/// Deterministic overlay provider. Coarse requests blend into the identity
/// render; refine requests blend into the supplied base render, which makes
/// it an idempotent refinement stub.
#[derive(Debug, Clone)]
pub struct ProceduralProvider {
    pub spec: ProceduralMakeupSpec,
}

impl ProceduralProvider {
    pub fn new(spec: ProceduralMakeupSpec) -> Self {
        Self { spec }
    }
}

impl GuidanceProvider for ProceduralProvider {
    fn provide(&self, request: &GuidanceRequest<'_>, view: &ViewContext<'_>) -> Result<ImageBuffer> {
        request.validate()?;
        let base = request.base_render.unwrap_or(view.identity);
        provide_procedural(&self.spec, base, view.gbuffer)
    }
}

/// Procedural guidance with independent per-view disagreement: each
/// (pose, camera) pair gets its own overlay color offset and its own
/// UV-space noise field.
#[derive(Debug, Clone)]
pub struct PerViewProvider {
    pub spec: ProceduralMakeupSpec,
    /// Half-width of the uniform per-view overlay color offset.
    pub color_jitter: f64,
    /// Standard deviation of the per-view noise field.
    pub noise_sigma: f64,
    /// Cells per side of the noise field in UV space.
    pub noise_resolution: usize,
    pub seed: u64,
}

impl PerViewProvider {
    fn view_rng(&self, pose_id: &str, camera_id: &str) -> ChaCha8Rng {
        let key = format!("{pose_id}\u{1f}{camera_id}");
        ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(key.as_bytes()))
    }

    /// Overlays as seen by one view.
    pub fn view_spec(&self, pose_id: &str, camera_id: &str) -> ProceduralMakeupSpec {
        let mut rng = self.view_rng(pose_id, camera_id);
        let res = self.noise_resolution.max(1);
        let normal = rand_distr::Normal::new(0.0, self.noise_sigma.max(0.0)).expect("finite sigma");
        let overlays = self
            .spec
            .overlays
            .iter()
            .map(|(&label, o)| {
                let shift: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..=1.0) * self.color_jitter);
                let noise: Vec<[f64; 3]> = (0..res * res)
                    .map(|_| std::array::from_fn(|_| rng.sample(normal)))
                    .collect();
                let base = o.clone();
                let pattern = TextureMap::from_fn(res, |x, y| {
                    let uv = [(x as f64 + 0.5) / res as f64, (y as f64 + 0.5) / res as f64];
                    let c = base.color_at(uv);
                    let n = noise[y * res + x];
                    [0, 1, 2].map(|i| (c[i] + shift[i] + n[i]).clamp(0.0, 1.0))
                });
                let overlay = RegionOverlay {
                    color: o.color,
                    beta: o.beta,
                    pattern: Some(pattern),
                };
                (label, overlay)
            })
            .collect();
        ProceduralMakeupSpec { overlays }
    }
}

impl GuidanceProvider for PerViewProvider {
    fn provide(&self, request: &GuidanceRequest<'_>, view: &ViewContext<'_>) -> Result<ImageBuffer> {
        request.validate()?;
        let base = request.base_render.unwrap_or(view.identity);
        let spec = self.view_spec(&request.pose_id, &request.camera_id);
        provide_procedural(&spec, base, view.gbuffer)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

type ManifestKey = (String, String, Stage);

/// Index of offline guidance images keyed by pose, camera and stage.
///
/// One record per line: `pose_id camera_id stage path`, whitespace
/// separated, with the path relative to the manifest. Blank lines and lines
/// starting with `#` are ignored.
#[derive(Debug, Clone, Default)]
pub struct Manifest {
    entries: HashMap<ManifestKey, PathBuf>,
}

impl Manifest {
    pub fn parse(text: &str, base_dir: &Path, origin: &Path) -> Result<Self> {
        let mut entries = HashMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.splitn(4, char::is_whitespace).map(str::trim);
            let bad = |r: &str| Error::format("manifest", origin, format!("line {}: {r}", lineno + 1));
            let (Some(pose), Some(cam), Some(stage), Some(path)) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
                return Err(bad("expected `pose_id camera_id stage path`"));
            };
            let stage: Stage = stage.parse().map_err(|_| bad("stage must be coarse or refine"))?;
            if path.is_empty() {
                return Err(bad("empty path"));
            }
            let key = (pose.to_string(), cam.to_string(), stage);
            if entries.insert(key, base_dir.join(path)).is_some() {
                return Err(bad("duplicate entry"));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")), path)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn lookup(&self, pose_id: &str, camera_id: &str, stage: Stage) -> Option<&Path> {
        self.entries
            .get(&(pose_id.to_string(), camera_id.to_string(), stage))
            .map(PathBuf::as_path)
    }
}

/// Serves manifest images, decoding lazily and keeping at most `capacity`
/// decoded images.
pub struct FileProvider {
    manifest: Manifest,
    cache: Mutex<LruCache<PathBuf, Arc<ImageBuffer>>>,
}

impl FileProvider {
    pub const DEFAULT_CAPACITY: usize = 64;

    pub fn new(manifest: Manifest, capacity: usize) -> Self {
        let cap = NonZeroUsize::new(capacity.max(1)).expect("non-zero");
        Self {
            manifest,
            cache: Mutex::new(LruCache::new(cap)),
        }
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn cached(&self) -> usize {
        self.cache.lock().expect("cache lock").len()
    }

    fn fetch(&self, path: &Path) -> Result<Arc<ImageBuffer>> {
        if let Some(img) = self.cache.lock().expect("cache lock").get(path) {
            return Ok(Arc::clone(img));
        }
        let img = Arc::new(ImageBuffer::load(path)?);
        self.cache
            .lock()
            .expect("cache lock")
            .put(path.to_path_buf(), Arc::clone(&img));
        Ok(img)
    }
}

impl GuidanceProvider for FileProvider {
    fn provide(&self, request: &GuidanceRequest<'_>, view: &ViewContext<'_>) -> Result<ImageBuffer> {
        request.validate()?;
        let path = self
            .manifest
            .lookup(&request.pose_id, &request.camera_id, request.stage)
            .ok_or_else(|| Error::MissingGuidance {
                pose_id: request.pose_id.clone(),
                camera_id: request.camera_id.clone(),
                stage: request.stage.to_string(),
            })?;
        let img = self.fetch(path)?;
        img.check_dims(view.identity.dims())?;
        Ok((*img).clone())
    }
}

/// Requests refined guidance for `request.base_render` from `provider`.
pub fn refine(provider: &dyn GuidanceProvider, request: &GuidanceRequest<'_>, view: &ViewContext<'_>) -> Result<ImageBuffer> {
    if request.stage != Stage::Refine {
        return Err(Error::InvalidRequest("refine called with a coarse request".into()));
    }
    request.validate()?;
    provider.provide(request, view)
}

/// Mean L1 between a refinement and its base outside `mask` on covered
/// pixels; `None` when that region is empty.
pub fn refinement_drift(base: &ImageBuffer, refined: &ImageBuffer, mask: &Mask, coverage: &Mask) -> Option<f64> {
    base.mean_abs_diff(refined, Some(&coverage.and_not(mask)))
}
