use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use log::info;

use gsmakeup::avatar::{AvatarModel, MeshPose};
use gsmakeup::guidance::{FileProvider, GuidanceProvider, GuidanceRequest, Manifest, ProceduralProvider, ViewContext};
use gsmakeup::image::ImageBuffer;
use gsmakeup::io;
use gsmakeup::metrics::evaluate;
use gsmakeup::render::{rasterize_mesh, render_avatar, Camera};
use gsmakeup::synth::{synth_head, SynthConfig};
use gsmakeup::train::{CoarseTarget, TrainOutcome, Trainer};
use gsmakeup::uv::{bake, BakeConfig, BakeView, UvTexture};

use crate::config::{self, RunConfig, Source};
use crate::exit::ConfigError;

pub struct SynthOptions {
    pub out: PathBuf,
    pub seed: u64,
    pub resolution: usize,
    pub density: usize,
    pub n_lon: usize,
    pub n_lat: usize,
}

pub fn synth(opts: &SynthOptions) -> anyhow::Result<()> {
    let cfg = SynthConfig {
        n_lon: opts.n_lon,
        n_lat: opts.n_lat,
        density: opts.density,
        seed: opts.seed,
        resolution: opts.resolution,
        ..SynthConfig::default()
    };
    if opts.resolution == 0 || opts.density == 0 {
        return Err(anyhow!(ConfigError("resolution and density must be positive".into())));
    }
    let head = synth_head(&cfg)?;
    let out = &opts.out;
    create_dir(out)?;
    io::save_avatar(&head.model, out.join("avatar.gsa"))?;
    io::save_pose_dir(&head.poses, out.join("poses"))?;
    io::save_camera_rig(&head.ring_cameras, out.join("ring_cameras.txt"))?;
    io::save_camera_rig(&head.eval_cameras, out.join("eval_cameras.txt"))?;
    let starter = config::starter(opts.seed, opts.resolution);
    write(out.join("gsmakeup.toml"), toml::to_string(&starter)?)?;
    stamp(out, "synth-head", &starter.hash(), opts.seed)?;
    info!(
        "{} triangles, {} kernels, {} poses written to {}",
        head.model.mesh.num_triangles(),
        head.model.kernels.len(),
        head.poses.len(),
        out.display()
    );
    Ok(())
}

/// Inputs shared by every pipeline command.
pub struct Run {
    pub cfg: RunConfig,
    pub original: AvatarModel,
    pub poses: Vec<MeshPose>,
}

impl Run {
    pub fn open(cfg: RunConfig) -> anyhow::Result<Self> {
        let original = io::load_avatar(&cfg.paths.avatar)?;
        let poses = io::load_pose_dir(&cfg.paths.poses)?;
        if poses.is_empty() {
            return Err(anyhow!(gsmakeup::Error::format(
                "pose directory",
                &cfg.paths.poses,
                "no .pose files"
            )));
        }
        for p in &poses {
            p.validate(&original.mesh)?;
        }
        create_dir(&cfg.paths.out)?;
        Ok(Self { cfg, original, poses })
    }

    fn out(&self, name: &str) -> PathBuf {
        self.cfg.paths.out.join(name)
    }

    fn rig(&self, path: &Path) -> anyhow::Result<Vec<Camera>> {
        let r = self.cfg.resolution;
        Ok(io::load_camera_rig(path)?.iter().map(|c| c.with_resolution(r, r)).collect())
    }

    fn pose(&self, id: &str) -> anyhow::Result<&MeshPose> {
        self.poses
            .iter()
            .find(|p| p.pose_id == id)
            .ok_or_else(|| anyhow!(ConfigError(format!("unknown pose `{id}`"))))
    }

    fn provider(&self) -> anyhow::Result<Box<dyn GuidanceProvider>> {
        Ok(match self.cfg.guidance.source {
            Source::Procedural => Box::new(ProceduralProvider::new(self.cfg.makeup())),
            Source::Manifest => {
                let path = self.cfg.paths.manifest.as_ref().expect("validated");
                Box::new(FileProvider::new(Manifest::load(path)?, self.cfg.guidance.cache))
            }
        })
    }

    fn stamp(&self, command: &str) -> anyhow::Result<()> {
        stamp(&self.cfg.paths.out, command, &self.cfg.hash(), self.cfg.seed)
    }

    fn load_checkpoint(&self, path: &Path) -> anyhow::Result<AvatarModel> {
        let model = io::load_avatar(path)?;
        if model.mesh != self.original.mesh || model.binding != self.original.binding {
            return Err(anyhow!(gsmakeup::Error::format(
                "checkpoint",
                path,
                "mesh or binding differs from the configured avatar"
            )));
        }
        Ok(model)
    }

    pub fn bake(&self) -> anyhow::Result<()> {
        let canon = self.pose(&self.cfg.bake.canonical_pose)?;
        let cams = self.rig(self.cfg.paths.bake_rig())?;
        let provider = self.provider()?;
        let bg = self.cfg.background;
        let mut views = Vec::with_capacity(cams.len());
        for cam in &cams {
            let gbuffer = rasterize_mesh(&self.original.mesh, canon, cam)?;
            let identity = render_avatar(&self.original, canon, cam, bg)?;
            let request = GuidanceRequest::coarse(canon.pose_id.clone(), cam.camera_id.clone());
            let ctx = ViewContext {
                identity: &identity,
                gbuffer: &gbuffer,
            };
            let image = provider.provide(&request, &ctx)?;
            views.push((cam.camera_id.clone(), image, gbuffer));
        }
        let bake_views: Vec<BakeView> = views
            .iter()
            .map(|(id, image, gbuffer)| BakeView {
                camera_id: id,
                image,
                gbuffer,
            })
            .collect();
        let config = BakeConfig {
            resolution: self.cfg.bake.resolution,
            dilation_iters: self.cfg.bake.dilation_iters,
            ..BakeConfig::new(canon.pose_id.clone(), cams.iter().map(|c| c.camera_id.clone()).collect())
        };
        let texture = bake(&bake_views, &config)?;
        texture.save(self.out("texture.pfm"))?;
        texture.to_image([0.0; 3])?.save_png(self.out("texture.png"))?;
        info!(
            "baked {} views into {}x{} texels, {} observed",
            cams.len(),
            config.resolution,
            config.resolution,
            texture.observed_count()
        );
        self.stamp("bake")
    }

    fn trainer<'a>(&'a self, cams: &'a [Camera], mask: &'a gsmakeup::guidance::MaskSpec, train: &'a gsmakeup::train::TrainConfig) -> Trainer<'a> {
        Trainer {
            original: &self.original,
            poses: &self.poses,
            cameras: cams,
            mask_spec: mask,
            config: train,
        }
    }

    fn finish_stage(&self, name: &str, outcome: &TrainOutcome) -> anyhow::Result<()> {
        io::save_avatar(&outcome.model, self.out(&format!("{name}.gsa")))?;
        io::write_training_log(&outcome.log, self.out(&format!("{name}_log.tsv")))?;
        if let Some(last) = outcome.log.last() {
            info!("{name}: {} iterations, final loss {:.6}", outcome.log.len(), last.loss.total);
        }
        self.stamp(name)
    }

    pub fn coarse(&self, from: Option<&Path>, texture: Option<&Path>) -> anyhow::Result<()> {
        let start = match from {
            Some(p) => self.load_checkpoint(p)?,
            None => self.original.clone(),
        };
        let texture = UvTexture::load(texture.map_or_else(|| self.out("texture.pfm"), Path::to_path_buf))?;
        let cams = self.rig(&self.cfg.paths.cameras)?;
        let (mask, train) = (self.cfg.mask_spec(), self.cfg.train_config());
        let outcome = self.trainer(&cams, &mask, &train).coarse(start, CoarseTarget::Texture(&texture), None)?;
        self.finish_stage("coarse", &outcome)
    }

    pub fn refine(&self, from: Option<&Path>) -> anyhow::Result<()> {
        let start = self.load_checkpoint(&from.map_or_else(|| self.out("coarse.gsa"), Path::to_path_buf))?;
        let provider = self.provider()?;
        let cams = self.rig(&self.cfg.paths.cameras)?;
        let (mask, train) = (self.cfg.mask_spec(), self.cfg.train_config());
        let outcome = self.trainer(&cams, &mask, &train).refine(start, provider.as_ref(), None)?;
        self.finish_stage("refine", &outcome)
    }

    fn checkpoint(&self, path: Option<&Path>) -> anyhow::Result<AvatarModel> {
        self.load_checkpoint(&path.map_or_else(|| self.out("refine.gsa"), Path::to_path_buf))
    }

    fn frame(&self, model: &AvatarModel, pose: &MeshPose, cam: &Camera) -> anyhow::Result<ImageBuffer> {
        let img = render_avatar(model, pose, cam, self.cfg.background)?;
        if !img.is_finite() {
            return Err(anyhow!(gsmakeup::Error::Numerical(format!(
                "non-finite pixels rendering pose `{}` from `{}`",
                pose.pose_id, cam.camera_id
            ))));
        }
        Ok(img)
    }

    pub fn render(&self, checkpoint: Option<&Path>) -> anyhow::Result<()> {
        let model = self.checkpoint(checkpoint)?;
        let cams = self.rig(self.cfg.paths.eval_rig())?;
        let dir = self.out("frames");
        create_dir(&dir)?;
        for pose in &self.poses {
            for cam in &cams {
                self.frame(&model, pose, cam)?
                    .save_png(dir.join(format!("{}__{}.png", pose.pose_id, cam.camera_id)))?;
            }
        }
        info!("rendered {} frames to {}", self.poses.len() * cams.len(), dir.display());
        self.stamp("render")
    }

    pub fn animate(&self, checkpoint: Option<&Path>) -> anyhow::Result<()> {
        let model = self.checkpoint(checkpoint)?;
        let cams = self.rig(self.cfg.paths.eval_rig())?;
        let cam = match &self.cfg.animate.camera {
            Some(id) => cams
                .iter()
                .find(|c| &c.camera_id == id)
                .ok_or_else(|| anyhow!(ConfigError(format!("unknown camera `{id}`"))))?,
            None => cams.first().ok_or_else(|| anyhow!(ConfigError("eval rig is empty".into())))?,
        };
        let sequence: Vec<&MeshPose> = if self.cfg.animate.sequence.is_empty() {
            self.poses.iter().collect()
        } else {
            self.cfg.animate.sequence.iter().map(|id| self.pose(id)).collect::<anyhow::Result<_>>()?
        };
        let dir = self.out("animation");
        create_dir(&dir)?;
        for (i, pose) in sequence.iter().enumerate() {
            self.frame(&model, pose, cam)?.save_png(dir.join(format!("frame_{i:04}.png")))?;
        }
        info!("animated {} frames from `{}`", sequence.len(), cam.camera_id);
        self.stamp("animate")
    }

    pub fn eval(&self, checkpoint: Option<&Path>, texture: Option<&Path>) -> anyhow::Result<()> {
        let model = self.checkpoint(checkpoint)?;
        let texture = UvTexture::load(texture.map_or_else(|| self.out("texture.pfm"), Path::to_path_buf))?;
        let cams = self.rig(self.cfg.paths.eval_rig())?;
        let poses: Vec<MeshPose> = if self.cfg.eval.poses.is_empty() {
            self.poses.clone()
        } else {
            self.cfg.eval.poses.iter().map(|id| self.pose(id).cloned()).collect::<anyhow::Result<_>>()?
        };
        let res = self.cfg.eval.consistency_resolution;
        let report = evaluate(
            &self.original,
            &model,
            &texture,
            &poses,
            &cams,
            &self.cfg.mask_spec(),
            self.cfg.background,
            (res > 0).then_some(res),
        )?;
        write(self.out("eval_report.txt"), report.to_text())?;
        write(self.out("eval_report.kv"), report.to_key_values())?;
        info!(
            "mean psnr {:.3}, ssim {:.4}, drift {:.6}",
            report.mean_psnr(),
            report.mean_ssim(),
            report.mean_drift()
        );
        self.stamp("eval")
    }
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).map_err(|e| anyhow!(gsmakeup::Error::io(dir, e)))
}

fn write(path: PathBuf, text: String) -> anyhow::Result<()> {
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

fn stamp(dir: &Path, command: &str, hash: &str, seed: u64) -> anyhow::Result<()> {
    let text = format!(
        "command={command}\nconfig_sha256={hash}\nseed={seed}\nversion={}\n",
        env!("CARGO_PKG_VERSION")
    );
    write(dir.join(format!("{command}.stamp")), text)
}
