//! `gsmakeup` command-line driver.

mod commands;
mod config;
mod exit;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::anyhow;
use clap::{Args, Parser, Subcommand};

use commands::{Run, SynthOptions};
use config::RunConfig;
use exit::ConfigError;

#[derive(Parser)]
#[command(name = "gsmakeup", version, about = "Makeup transfer for mesh-rigged Gaussian head avatars")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides `seed` in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `paths.out` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated `key=value` overrides; bare keys address `[train]`.
    #[arg(long = "stage-overrides", value_delimiter = ',')]
    stage_overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic head: avatar, poses, camera rigs and a starter config.
    SynthHead {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 512)]
        resolution: usize,
        /// Kernels per triangle.
        #[arg(long, default_value_t = 5)]
        density: usize,
        #[arg(long, default_value_t = 40)]
        n_lon: usize,
        #[arg(long, default_value_t = 28)]
        n_lat: usize,
    },
    /// Bake canonical-pose guidance into the UV texture.
    Bake(Common),
    /// Optimize colors and opacities against the baked texture.
    Coarse {
        #[command(flatten)]
        common: Common,
        /// Starting checkpoint; defaults to the configured avatar.
        #[arg(long)]
        from: Option<PathBuf>,
        #[arg(long)]
        texture: Option<PathBuf>,
    },
    /// Refine against per-iteration guidance.
    Refine {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<out>/coarse.gsa`.
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Render every pose from every eval camera.
    Render {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<out>/refine.gsa`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Render the configured pose sequence from one camera.
    Animate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score a checkpoint against the texture and the original avatar.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        texture: Option<PathBuf>,
    },
}

fn open(common: &Common) -> anyhow::Result<Run> {
    let mut cfg = RunConfig::load(&common.config, &common.stage_overrides).map_err(|e| anyhow!(ConfigError(format!("{e:#}"))))?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.paths.out = out.clone();
    }
    Run::open(cfg)
}

fn init_threads() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var("GSMAKEUP_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .map_err(|_| anyhow!(ConfigError(format!("GSMAKEUP_THREADS=`{raw}` is not a thread count"))))?;
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| anyhow!(ConfigError(e.to_string())))?;
    #[cfg(not(feature = "parallel"))]
    let _ = n;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    init_threads()?;
    match cli.command {
        Command::SynthHead {
            out,
            seed,
            resolution,
            density,
            n_lon,
            n_lat,
        } => commands::synth(&SynthOptions {
            out,
            seed,
            resolution,
            density,
            n_lon,
            n_lat,
        }),
        Command::Bake(common) => open(&common)?.bake(),
        Command::Coarse { common, from, texture } => open(&common)?.coarse(from.as_deref(), texture.as_deref()),
        Command::Refine { common, from } => open(&common)?.refine(from.as_deref()),
        Command::Render { common, checkpoint } => open(&common)?.render(checkpoint.as_deref()),
        Command::Animate { common, checkpoint } => open(&common)?.animate(checkpoint.as_deref()),
        Command::Eval {
            common,
            checkpoint,
            texture,
        } => open(&common)?.eval(checkpoint.as_deref(), texture.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit::code(&e))
        }
    }
}
