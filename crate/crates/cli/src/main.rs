use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use avatar_cli::commands::{self, load_config};
use avatar_core::io::load_avatar;
use avatar_core::synth::Preset;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "avatar",
    version,
    about = "UV-space Gaussian avatars: build, fit, render and serve"
)]
struct Cli {
    /// JSON or TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed of the command's configuration section.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory or file.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Rasterize a skinned mesh into a new avatar container.
    Init {
        #[arg(long)]
        mesh: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        skeleton: PathBuf,
        #[arg(long)]
        resolution: Option<usize>,
    },
    /// Generate a synthetic multi-view dataset with a hidden ground truth.
    Synth {
        #[arg(long)]
        preset: Option<Preset>,
        #[arg(long)]
        views: Option<usize>,
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Fit an avatar to a dataset manifest.
    Fit {
        #[arg(long)]
        bundle: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Checkpoint directory to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<u64>,
    },
    /// Render one frame to PNG.
    Render {
        #[command(flatten)]
        input: RenderInput,
        /// Also write the linear float image.
        #[arg(long)]
        raw: Option<PathBuf>,
        /// Also export the posed Gaussians.
        #[arg(long)]
        ply: Option<PathBuf>,
    },
    /// Export posed Gaussians as a binary PLY.
    ExportPly {
        #[command(flatten)]
        input: RenderInput,
    },
    /// Serve the HTTP render API.
    Serve {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
}

#[derive(Args)]
struct RenderInput {
    #[arg(long)]
    bundle: PathBuf,
    /// Zero pose when omitted.
    #[arg(long)]
    pose: Option<PathBuf>,
    /// Zero latent when omitted.
    #[arg(long)]
    latent: Option<PathBuf>,
    /// The service's default camera when omitted.
    #[arg(long)]
    camera: Option<PathBuf>,
    /// Background as `r,g,b` in linear [0, 1].
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.0, 0.0, 0.0])]
    background: Vec<f64>,
}

impl RenderInput {
    fn load(&self) -> anyhow::Result<(avatar_core::pipeline::Avatar, avatar_cli::render::RenderRequest)> {
        let avatar = load_avatar(&self.bundle).with_context(|| format!("loading bundle {}", self.bundle.display()))?;
        let bg = [self.background[0], self.background[1], self.background[2]];
        let req = commands::request_from_files(
            &avatar,
            self.pose.as_deref(),
            self.latent.as_deref(),
            self.camera.as_deref(),
            bg,
        )?;
        Ok((avatar, req))
    }
}

fn out_or(out: &Option<PathBuf>, default: &str) -> PathBuf {
    out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut config = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Init {
            mesh,
            weights,
            skeleton,
            resolution,
        } => {
            if let Some(r) = resolution {
                config.resolution = r;
            }
            config.validate()?;
            let out = out_or(&cli.out, "avatar");
            let report = commands::init(&config, &mesh, &weights, &skeleton, &out)?;
            println!(
                "valid pixels: {}  overlaps: {}  rotation fallbacks: {}",
                report.valid_pixels, report.overlaps, report.rotation_fallbacks
            );
            println!("wrote {}", out.display());
        }
        Command::Synth { preset, views, frames } => {
            let s = &mut config.synth;
            if let Some(p) = preset {
                s.preset = p;
            }
            if let Some(v) = views {
                s.views = v;
            }
            if let Some(f) = frames {
                s.frames = f;
            }
            if let Some(seed) = cli.seed {
                s.seed = seed;
            }
            let out = out_or(&cli.out, "synth");
            let summary = commands::synth(&config, &out)?;
            println!("samples: {}  valid pixels: {}", summary.samples, summary.valid_pixels);
            println!("wrote {}", out.display());
        }
        Command::Fit {
            bundle,
            manifest,
            resume,
            iterations,
        } => {
            if let Some(seed) = cli.seed {
                config.fit.seed = seed;
            }
            if let Some(n) = iterations {
                config.fit.iterations = n;
            }
            let out = out_or(&cli.out, "fit");
            let start = Instant::now();
            let outcome =
                commands::fit_command(&config, bundle.as_deref(), manifest.as_deref(), resume.as_deref(), &out)?;
            let h = &outcome.summary.holdout;
            println!(
                "steps: {}  holdout psnr: {:.3} dB  holdout ssim: {:.4}  images: {}  skipped updates: {}  time: {:.1}s",
                outcome.summary.steps,
                h.psnr,
                h.ssim,
                h.images,
                outcome.summary.skipped_updates,
                start.elapsed().as_secs_f64()
            );
            println!("wrote {}", outcome.bundle.display());
        }
        Command::Render { input, raw, ply } => {
            let (avatar, req) = input.load()?;
            let out = out_or(&cli.out, "render.png");
            commands::render_command(&avatar, &req, &out, raw.as_deref(), ply.as_deref())?;
            println!("wrote {}", out.display());
        }
        Command::ExportPly { input } => {
            let (avatar, req) = input.load()?;
            let out = out_or(&cli.out, "avatar.ply");
            let n = commands::export_ply(&avatar, &req, &out)?;
            println!("wrote {n} splats to {}", out.display());
        }
        Command::Serve { bundle, addr } => {
            let avatar = load_avatar(&bundle).with_context(|| format!("loading bundle {}", bundle.display()))?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(avatar_cli::server::serve(avatar, addr))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("AVATAR_LOG", "info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Library errors already embed their source; skip repeats.
            let mut msg = String::new();
            for cause in e.chain() {
                let s = cause.to_string();
                if !msg.contains(&s) {
                    if !msg.is_empty() {
                        msg.push_str(": ");
                    }
                    msg.push_str(&s);
                }
            }
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
