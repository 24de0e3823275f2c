//! Run configuration: a TOML file plus command-line overrides.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use gsmakeup::guidance::{MaskSpec, ProceduralMakeupSpec, RegionOverlay};
use gsmakeup::train::TrainConfig;
use gsmakeup::uv;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    /// Square render size applied to every camera rig.
    #[serde(default = "default_resolution")]
    pub resolution: usize,
    #[serde(default = "white")]
    pub background: [f64; 3],
    pub paths: Paths,
    #[serde(default)]
    pub bake: Bake,
    #[serde(default)]
    pub train: Train,
    #[serde(default)]
    pub mask: Mask,
    #[serde(default)]
    pub guidance: Guidance,
    #[serde(default)]
    pub animate: Animate,
    #[serde(default)]
    pub eval: Eval,
}

fn default_resolution() -> usize {
    512
}

fn white() -> [f64; 3] {
    [1.0; 3]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub avatar: PathBuf,
    /// Directory of `*.pose` files.
    pub poses: PathBuf,
    /// Rig used for training.
    pub cameras: PathBuf,
    /// Rig used for baking; defaults to `cameras`.
    pub bake_cameras: Option<PathBuf>,
    /// Rig used for render and eval; defaults to `cameras`.
    pub eval_cameras: Option<PathBuf>,
    /// Guidance manifest, required when `guidance.source = "manifest"`.
    pub manifest: Option<PathBuf>,
    #[serde(default = "default_out")]
    pub out: PathBuf,
}

fn default_out() -> PathBuf {
    PathBuf::from("run")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bake {
    pub resolution: usize,
    pub dilation_iters: usize,
    pub canonical_pose: String,
}

impl Default for Bake {
    fn default() -> Self {
        Self {
            resolution: uv::DEFAULT_RESOLUTION,
            dilation_iters: uv::DEFAULT_DILATION,
            canonical_pose: "neutral".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Train {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lr: f64,
    pub lr_final: Option<f64>,
    pub coarse_iters: usize,
    pub refine_iters: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub perceptual_weight: f64,
    pub view_cache: usize,
}

impl Default for Train {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            lambda1: d.lambda1,
            lambda2: d.lambda2,
            lr: d.lr,
            lr_final: d.lr_final,
            coarse_iters: d.coarse_iters,
            refine_iters: d.refine_iters,
            adam_beta1: d.adam_beta1,
            adam_beta2: d.adam_beta2,
            adam_eps: d.adam_eps,
            perceptual_weight: d.perceptual_weight,
            view_cache: d.view_cache,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Mask {
    pub labels: Vec<u32>,
}

impl Default for Mask {
    fn default() -> Self {
        Self { labels: vec![1, 2] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Procedural,
    Manifest,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Overlay {
    pub label: u32,
    pub color: [f64; 3],
    #[serde(default = "one")]
    pub beta: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Guidance {
    pub source: Source,
    #[serde(default)]
    pub overlay: Vec<Overlay>,
    /// Decoded manifest images kept in memory.
    #[serde(default = "cache_size")]
    pub cache: usize,
}

fn cache_size() -> usize {
    64
}

impl Default for Guidance {
    fn default() -> Self {
        Self {
            source: Source::Procedural,
            overlay: vec![
                Overlay {
                    label: 1,
                    color: [0.78, 0.10, 0.16],
                    beta: 1.0,
                },
                Overlay {
                    label: 2,
                    color: [0.22, 0.32, 0.80],
                    beta: 1.0,
                },
            ],
            cache: cache_size(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Animate {
    /// Pose ids, one per frame. Empty means every pose in order.
    #[serde(default)]
    pub sequence: Vec<String>,
    /// Camera id from the eval rig; defaults to its first camera.
    pub camera: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Eval {
    /// Pose ids to score. Empty means every pose.
    #[serde(default)]
    pub poses: Vec<String>,
    /// Texel grid for uv_consistency; 0 skips it.
    pub consistency_resolution: usize,
}

impl Default for Eval {
    fn default() -> Self {
        Self {
            poses: Vec::new(),
            consistency_resolution: uv::DEFAULT_RESOLUTION,
        }
    }
}

impl RunConfig {
    /// Reads `path`, applies `key=value` overrides and resolves relative
    /// paths against the config file's directory.
    pub fn load(path: &Path, overrides: &[String]) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut doc: toml::Table = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let mut cfg: RunConfig = doc.try_into().with_context(|| format!("invalid config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.paths.resolve(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.resolution == 0 {
            bail!("resolution must be positive");
        }
        if self.bake.resolution == 0 {
            bail!("bake.resolution must be positive");
        }
        if self.guidance.source == Source::Manifest && self.paths.manifest.is_none() {
            bail!("guidance.source = \"manifest\" needs paths.manifest");
        }
        self.train_config().validate()?;
        self.makeup().validate(None)?;
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            lambda1: t.lambda1,
            lambda2: t.lambda2,
            lr: t.lr,
            lr_final: t.lr_final,
            coarse_iters: t.coarse_iters,
            refine_iters: t.refine_iters,
            adam_beta1: t.adam_beta1,
            adam_beta2: t.adam_beta2,
            adam_eps: t.adam_eps,
            seed: self.seed,
            perceptual_weight: t.perceptual_weight,
            background: self.background,
            view_cache: t.view_cache,
        }
    }

    pub fn mask_spec(&self) -> MaskSpec {
        MaskSpec::new(self.mask.labels.iter().copied())
    }

    pub fn makeup(&self) -> ProceduralMakeupSpec {
        ProceduralMakeupSpec::new(
            self.guidance
                .overlay
                .iter()
                .map(|o| (o.label, RegionOverlay::flat(o.color, o.beta))),
        )
    }

    /// Hex SHA-256 of the effective configuration, ignoring the output
    /// directory.
    pub fn hash(&self) -> String {
        let mut inputs = self.clone();
        inputs.paths.out = PathBuf::new();
        let text = toml::to_string(&inputs).expect("config serializes");
        Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl Paths {
    fn resolve(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.avatar);
        join(&mut self.poses);
        join(&mut self.cameras);
        join(&mut self.out);
        for p in [&mut self.bake_cameras, &mut self.eval_cameras, &mut self.manifest].into_iter().flatten() {
            join(p);
        }
    }

    pub fn bake_rig(&self) -> &Path {
        self.bake_cameras.as_deref().unwrap_or(&self.cameras)
    }

    pub fn eval_rig(&self) -> &Path {
        self.eval_cameras.as_deref().unwrap_or(&self.cameras)
    }
}

/// `key=value` with a dotted key; bare keys address the `train` table.
/// The value is parsed as a TOML value, falling back to a plain string.
fn apply_override(doc: &mut toml::Table, spec: &str) -> anyhow::Result<()> {
    let Some((key, raw)) = spec.split_once('=') else {
        bail!("override `{spec}` is not key=value");
    };
    let key = key.trim();
    let path: Vec<&str> = if key.contains('.') {
        key.split('.').collect()
    } else {
        vec!["train", key]
    };
    let value = toml::from_str::<toml::Table>(&format!("v = {}", raw.trim()))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let (last, parents) = path.split_last().expect("non-empty key");
    let mut table = doc;
    for p in parents {
        table = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .with_context(|| format!("override `{spec}`: `{p}` is not a table"))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

/// Starter configuration written next to a synthesized head.
pub fn starter(seed: u64, resolution: usize) -> RunConfig {
    RunConfig {
        seed,
        resolution,
        background: white(),
        paths: Paths {
            avatar: "avatar.gsa".into(),
            poses: "poses".into(),
            cameras: "eval_cameras.txt".into(),
            bake_cameras: Some("ring_cameras.txt".into()),
            eval_cameras: Some("eval_cameras.txt".into()),
            manifest: None,
            out: default_out(),
        },
        bake: Bake::default(),
        train: Train::default(),
        mask: Mask::default(),
        guidance: Guidance::default(),
        animate: Animate::default(),
        eval: Eval::default(),
    }
}
