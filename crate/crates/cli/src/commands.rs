//! Implementations behind the `avatar` subcommands.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use avatar_core::fitting::{fit, Adam, FitObserver, FitSummary, MetricsRow};
use avatar_core::io::{
    load_adam, load_avatar, load_camera, load_dataset, load_latent, load_pose, save_adam, save_avatar, Config,
};
use avatar_core::mesh::SkinnedMesh;
use avatar_core::pipeline::{Avatar, InitReport};
use avatar_core::skeleton::Skeleton;
use avatar_core::splat::{row_major, save_ply};
use avatar_core::synth::{generate, SynthSummary};

use crate::render::{encode_png, posed_scene, render_request, RenderRequest};

pub const ADAM_FILE: &str = "adam.bin";
pub const METRICS_FILE: &str = "metrics.csv";

pub fn load_config(path: Option<&Path>) -> anyhow::Result<Config> {
    let cfg = match path {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn init(config: &Config, mesh: &Path, weights: &Path, skeleton: &Path, out: &Path) -> anyhow::Result<InitReport> {
    let skeleton = Skeleton::load(skeleton)?;
    let mesh = SkinnedMesh::load(mesh, weights)?;
    let (avatar, report) = Avatar::initialize(
        &mesh,
        skeleton,
        config.resolution,
        config.knn,
        config.conditioner.clone(),
    )?;
    save_avatar(&avatar, out)?;
    Ok(report)
}

pub fn synth(config: &Config, out: &Path) -> anyhow::Result<SynthSummary> {
    Ok(generate(config, out)?)
}

/// Writes metrics rows as they arrive and checkpoints under
/// `out/checkpoints/iterNNNNNN`.
pub struct DiskObserver {
    out: PathBuf,
    csv: BufWriter<File>,
}

impl DiskObserver {
    /// With `append`, rows are added to an existing log.
    pub fn create(out: &Path, append: bool) -> anyhow::Result<Self> {
        std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        let path = out.join(METRICS_FILE);
        let existing = append && path.exists();
        let file = std::fs::OpenOptions::new()
            .create(true)
            .write(true)
            .append(existing)
            .truncate(!existing)
            .open(&path)
            .with_context(|| format!("opening {}", path.display()))?;
        let mut csv = BufWriter::new(file);
        if !existing {
            writeln!(csv, "{}", MetricsRow::CSV_HEADER)?;
        }
        Ok(DiskObserver {
            out: out.to_path_buf(),
            csv,
        })
    }
}

impl FitObserver for DiskObserver {
    fn metrics(&mut self, row: &MetricsRow) -> avatar_core::Result<()> {
        let path = self.out.join(METRICS_FILE);
        let io = |e| avatar_core::Error::Io {
            path: path.clone(),
            source: e,
        };
        writeln!(self.csv, "{}", row.to_csv()).map_err(io)?;
        self.csv.flush().map_err(io)?;
        log::info!(
            "iteration {}: loss {:.6} l1 {:.6} psnr_holdout {}",
            row.iteration,
            row.terms.total,
            row.terms.l1,
            row.psnr_holdout.map_or("-".into(), |p| format!("{p:.3}"))
        );
        Ok(())
    }

    fn checkpoint(&mut self, avatar: &Avatar, adam: &Adam) -> avatar_core::Result<Option<PathBuf>> {
        let dir = self.out.join("checkpoints").join(format!("iter{:06}", adam.step));
        save_checkpoint(avatar, adam, &dir)?;
        log::info!("checkpoint {}", dir.display());
        Ok(Some(dir))
    }
}

pub fn save_checkpoint(avatar: &Avatar, adam: &Adam, dir: &Path) -> avatar_core::Result<()> {
    save_avatar(avatar, dir)?;
    save_adam(adam, &dir.join(ADAM_FILE))
}

pub struct FitOutcome {
    pub summary: FitSummary,
    pub bundle: PathBuf,
}

/// Fits `bundle` (or the checkpoint `resume`) to the manifest's samples and
/// writes the result to `out/avatar`.
pub fn fit_command(
    config: &Config,
    bundle: Option<&Path>,
    manifest: Option<&Path>,
    resume: Option<&Path>,
    out: &Path,
) -> anyhow::Result<FitOutcome> {
    let (mut avatar, state) = match (resume, bundle) {
        (Some(dir), _) => {
            let avatar = load_avatar(dir).with_context(|| format!("loading checkpoint {}", dir.display()))?;
            let adam = load_adam(&dir.join(ADAM_FILE))?;
            log::info!("resuming at step {}", adam.step);
            (avatar, Some(adam))
        }
        (None, Some(b)) => (
            load_avatar(b).with_context(|| format!("loading bundle {}", b.display()))?,
            None,
        ),
        (None, None) => bail!("fit needs --bundle or --resume"),
    };
    let Some(manifest) = manifest.or(config.manifest.as_deref()) else {
        bail!("no manifest given on the command line or in the config");
    };
    let dataset = load_dataset(
        manifest,
        avatar.skeleton.pose_len(),
        avatar.conditioner.config.latent_dim,
    )
    .with_context(|| format!("loading manifest {}", manifest.display()))?;
    let mut observer = DiskObserver::create(out, resume.is_some())?;
    let summary = fit(&mut avatar, &dataset, &config.fit, state, &mut observer)?;
    let bundle = out.join("avatar");
    save_checkpoint(&avatar, &summary.optimizer, &bundle)?;
    Ok(FitOutcome { summary, bundle })
}

/// Reads the render inputs from files into a request.
pub fn request_from_files(
    avatar: &Avatar,
    pose: Option<&Path>,
    latent: Option<&Path>,
    camera: Option<&Path>,
    background: [f64; 3],
) -> anyhow::Result<RenderRequest> {
    let camera = match camera {
        Some(c) => load_camera(c)?.to_spec(),
        None => crate::server::meta(avatar).camera_default,
    };
    let pose = match pose {
        Some(p) => load_pose(p, avatar.skeleton.pose_len())?,
        None => avatar_core::skeleton::PoseVector::zero(&avatar.skeleton),
    };
    let expression_latent = latent.map(load_latent).transpose()?;
    Ok(RenderRequest {
        pose: pose.theta,
        root_transform: Some(row_major(&pose.root_transform)),
        expression_latent,
        camera,
        background,
    })
}

pub fn render_command(
    avatar: &Avatar,
    req: &RenderRequest,
    png: &Path,
    raw: Option<&Path>,
    ply: Option<&Path>,
) -> anyhow::Result<()> {
    let img = render_request(avatar, req)?;
    write_file(png, &encode_png(&img))?;
    if let Some(r) = raw {
        img.save_raw(r)?;
    }
    if let Some(p) = ply {
        save_ply(p, &posed_scene(avatar, req)?.splats)?;
    }
    Ok(())
}

pub fn export_ply(avatar: &Avatar, req: &RenderRequest, out: &Path) -> anyhow::Result<usize> {
    let scene = posed_scene(avatar, req)?;
    save_ply(out, &scene.splats)?;
    Ok(scene.splats.len())
}

fn write_file(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}
