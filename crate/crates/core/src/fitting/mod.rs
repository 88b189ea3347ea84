//! Training objective, optimizer and the fitting loop.

mod adam;
mod loss;

pub use adam::{Adam, AdamConfig};
pub use loss::{
    loss_l1, loss_offset, loss_scale, loss_ssim, psnr, psnr_from_mse, ssim, total_loss, total_loss_with_grad,
    weighted_total, LossGradient, LossInputs, LossTerms, LossWeights, SCALE_CAP, SSIM_C1, SSIM_C2, SSIM_SIGMA,
    SSIM_WINDOW,
};

use std::collections::HashMap;
use std::path::PathBuf;
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{average_expression_latents, sample_latent_weights, Conditioner, FeatureGrid};
use crate::error::{Error, Result};
use crate::image::FloatImage;
use crate::pipeline::{pose_backward, pose_gaussians, Avatar};
use crate::skeleton::{JointTransforms, PoseVector};
use crate::splat::{render_backward_retained, render_tiled_retained, Camera, Reduction, RenderOptions, DEFAULT_TILE};
use crate::uvmap::MIN_SCALE;

/// One training image with its driving signal.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: FloatImage,
    pub camera: Camera,
    pub pose: PoseVector,
    pub latent: Vec<f64>,
    pub mask: Option<Vec<bool>>,
    pub frame: usize,
    pub view: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub iterations: u64,
    pub seed: u64,
    pub lr: f64,
    pub loss: LossWeights,
    pub background: [f64; 3],
    /// View held out for evaluation; the highest view index when unset.
    pub holdout_view: Option<usize>,
    /// Held-out frames rendered for the periodic PSNR column.
    pub eval_frames: usize,
    pub log_every: u64,
    pub checkpoint_every: u64,
    /// Views of the same frame mixed into the face signal.
    pub latent_views: usize,
    /// Also optimize the base position, rotation and scale maps.
    pub unlock_base: bool,
    pub reduction: Reduction,
    pub tile_size: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            iterations: 20_000,
            seed: 0,
            lr: 1e-3,
            loss: LossWeights::default(),
            background: [0.0; 3],
            holdout_view: None,
            eval_frames: 4,
            log_every: 100,
            checkpoint_every: 1000,
            latent_views: 4,
            unlock_base: false,
            reduction: Reduction::Strict,
            tile_size: DEFAULT_TILE,
        }
    }
}

impl FitConfig {
    pub fn render_options(&self) -> RenderOptions {
        RenderOptions {
            tile_size: self.tile_size,
            reduction: self.reduction,
            ..Default::default()
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub iteration: u64,
    pub terms: LossTerms,
    pub psnr_holdout: Option<f64>,
}

impl MetricsRow {
    pub const CSV_HEADER: &'static str = "iteration,total,l1,ssim,lpips,offset,scale,psnr_holdout";

    pub fn to_csv(&self) -> String {
        let t = &self.terms;
        let psnr = self.psnr_holdout.map(|p| format!("{p}")).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{}",
            self.iteration, t.total, t.l1, t.ssim, t.lpips, t.offset, t.scale, psnr
        )
    }
}

/// Hooks for logging and checkpointing.
pub trait FitObserver {
    fn metrics(&mut self, _row: &MetricsRow) -> Result<()> {
        Ok(())
    }

    /// Persists the current state; returns where it was written.
    fn checkpoint(&mut self, _avatar: &Avatar, _adam: &Adam) -> Result<Option<PathBuf>> {
        Ok(None)
    }
}

/// Observer that keeps metrics in memory.
#[derive(Debug, Default)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
}

impl FitObserver for MetricsLog {
    fn metrics(&mut self, row: &MetricsRow) -> Result<()> {
        self.rows.push(*row);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub psnr: f64,
    pub ssim: f64,
    pub images: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitSummary {
    pub steps: u64,
    pub holdout: Evaluation,
    pub skipped_updates: u64,
    /// Final optimizer state, for resuming.
    pub optimizer: Adam,
}

/// Optimizer tensor lengths for an avatar.
pub fn parameter_shapes(avatar: &Avatar, unlock_base: bool) -> Vec<usize> {
    let mut shapes = vec![avatar.conditioner.weight.len(), avatar.conditioner.bias.len()];
    if unlock_base {
        let m = &avatar.maps;
        shapes.extend([m.base_position.len(), m.base_rotation.len(), m.base_scale.len()]);
    }
    shapes
}

/// Loss and gradients for one view.
pub struct StepResult {
    pub terms: LossTerms,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    /// Base map gradients `(position, rotation, scale)`.
    pub base: Option<(Vec<f64>, Vec<f64>, Vec<f64>)>,
}

/// Forward and backward pass for one target view.
#[allow(clippy::too_many_arguments)]
pub fn loss_and_gradient(
    avatar: &Avatar,
    pose_feature: &FeatureGrid,
    transforms: &JointTransforms,
    latent: &[f64],
    target: &FloatImage,
    mask: Option<&[bool]>,
    camera: &Camera,
    config: &FitConfig,
    options: &RenderOptions,
    want_base: bool,
) -> Result<StepResult> {
    let maps = &avatar.maps;
    let mixed = avatar.mixed_feature(pose_feature, latent)?;
    let corr = avatar.corrections(&mixed)?;
    let (scene, cache) = pose_gaussians(maps, &corr, transforms);
    let (rendered, pass) = render_tiled_retained(&scene, camera, config.background, options);
    if !rendered.color.same_shape(target) {
        return Err(Error::mismatch(
            "target image size",
            rendered.color.data.len(),
            target.data.len(),
        ));
    }
    let raw_scale: Vec<f64> = maps
        .base_scale
        .iter()
        .zip(&corr.delta_scale)
        .map(|(b, d)| b + d)
        .collect();
    let scale: Vec<f64> = raw_scale.iter().map(|s| s.max(MIN_SCALE)).collect();
    let inputs = LossInputs {
        rendered: &rendered.color,
        target,
        mask,
        delta_position: &corr.delta_position,
        scale: &scale,
        base_scale: &maps.base_scale,
        valid: &maps.valid,
    };
    let (terms, lg) = total_loss_with_grad(&inputs, &config.loss)?;
    let sg = render_backward_retained(&pass, &scene, camera, &lg.image)?;
    drop(pass);
    let mut g = pose_backward(maps, &cache, &sg);
    for (o, v) in g.delta_position.iter_mut().zip(&lg.delta_position) {
        *o += v;
    }
    for ((o, v), raw) in g.delta_scale.iter_mut().zip(&lg.scale).zip(&raw_scale) {
        if *raw >= MIN_SCALE {
            *o += v;
        }
    }
    let cg = avatar.conditioner.backward(&mixed, &maps.valid, &g)?;
    let base = want_base.then(|| {
        (
            g.delta_position.clone(),
            g.delta_rotation.clone(),
            g.delta_scale.clone(),
        )
    });
    Ok(StepResult {
        terms,
        weight: cg.weight,
        bias: cg.bias,
        base,
    })
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Which samples train and which are held out.
pub fn split(dataset: &Dataset, holdout_view: Option<usize>) -> (Vec<usize>, Vec<usize>) {
    let hv = holdout_view.or_else(|| dataset.samples.iter().map(|s| s.view).max());
    let (mut train, mut hold) = (Vec::new(), Vec::new());
    for (i, s) in dataset.samples.iter().enumerate() {
        if Some(s.view) == hv {
            hold.push(i);
        } else {
            train.push(i);
        }
    }
    (train, hold)
}

/// Mean PSNR and SSIM over the given samples, each rendered with its own
/// driving signal.
pub fn evaluate(avatar: &Avatar, dataset: &Dataset, indices: &[usize], config: &FitConfig) -> Result<Evaluation> {
    let options = config.render_options();
    let (mut p, mut s) = (0.0, 0.0);
    for &i in indices {
        let sample = &dataset.samples[i];
        let signal = avatar.driving_signal(sample.pose.clone(), sample.latent.clone())?;
        let img = avatar.render(&signal, &sample.camera, config.background, &options)?;
        p += psnr(&img.color, &sample.image)?;
        s += ssim(&img.color, &sample.image)?;
    }
    let n = indices.len().max(1) as f64;
    Ok(Evaluation {
        psnr: p / n,
        ssim: s / n,
        images: indices.len(),
    })
}

/// Optimizes the conditioner (and optionally the base maps) against the
/// dataset. Starts from `state` when resuming. Sampling depends only on the
/// seed and the iteration number, so a resumed run follows the same
/// schedule.
pub fn fit(
    avatar: &mut Avatar,
    dataset: &Dataset,
    config: &FitConfig,
    state: Option<Adam>,
    observer: &mut dyn FitObserver,
) -> Result<FitSummary> {
    config.loss.validate()?;
    let (train, holdout) = split(dataset, config.holdout_view);
    if train.is_empty() {
        return Err(Error::InvalidArgument(
            "no training samples outside the held-out view".into(),
        ));
    }
    for s in &dataset.samples {
        avatar.driving_signal(s.pose.clone(), s.latent.clone())?;
    }
    let render_options = config.render_options();
    let shapes = parameter_shapes(avatar, config.unlock_base);
    let mut adam = match state {
        Some(a) => {
            if a.m.iter().map(Vec::len).collect::<Vec<_>>() != shapes {
                return Err(Error::InvalidArgument(
                    "optimizer state does not match the parameters".into(),
                ));
            }
            a
        }
        None => Adam::new(config.adam(), &shapes),
    };

    let mut by_frame: HashMap<usize, Vec<usize>> = HashMap::new();
    for &i in &train {
        by_frame.entry(dataset.samples[i].frame).or_default().push(i);
    }
    let mut eval_set: Vec<usize> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for &i in &holdout {
        if eval_set.len() < config.eval_frames && seen.insert(dataset.samples[i].frame) {
            eval_set.push(i);
        }
    }

    let mut cache: HashMap<usize, Rc<(FeatureGrid, JointTransforms)>> = HashMap::new();
    let mut last_good: Option<PathBuf> = None;
    let n = train.len() as u64;
    let mut perm: Vec<usize> = Vec::new();
    let mut perm_epoch = u64::MAX;

    for it in adam.step..config.iterations {
        let epoch = it / n;
        if epoch != perm_epoch {
            perm = (0..train.len()).collect();
            perm.shuffle(&mut stream_rng(config.seed, epoch));
            perm_epoch = epoch;
        }
        let sample = &dataset.samples[train[perm[(it % n) as usize]]];
        let mut rng = stream_rng(config.seed, (1 << 63) | it);

        let mut views = by_frame[&sample.frame].clone();
        views.shuffle(&mut rng);
        views.truncate(config.latent_views.max(1));
        let latents: Vec<Vec<f64>> = views.iter().map(|&i| dataset.samples[i].latent.clone()).collect();
        let weights = sample_latent_weights(&mut rng, latents.len());
        let latent = average_expression_latents(&latents, &weights)?;

        let signal = avatar.driving_signal(sample.pose.clone(), latent)?;
        let features = match cache.get(&sample.frame) {
            Some(f) if !config.unlock_base => f.clone(),
            _ => {
                let f = Rc::new(avatar.pose_feature(&signal.pose)?);
                if !config.unlock_base {
                    cache.insert(sample.frame, f.clone());
                }
                f
            }
        };

        let mut step = loss_and_gradient(
            avatar,
            &features.0,
            &features.1,
            &signal.expression_latent,
            &sample.image,
            sample.mask.as_deref(),
            &sample.camera,
            config,
            &render_options,
            config.unlock_base,
        )?;
        if !step.terms.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: it as usize,
                last_good_checkpoint: last_good,
            });
        }

        if it % config.log_every.max(1) == 0 || it + 1 == config.iterations {
            let psnr_holdout = if eval_set.is_empty() {
                None
            } else {
                Some(evaluate(avatar, dataset, &eval_set, config)?.psnr)
            };
            observer.metrics(&MetricsRow {
                iteration: it,
                terms: step.terms,
                psnr_holdout,
            })?;
        }

        {
            let cond = &mut avatar.conditioner;
            let maps = &mut avatar.maps;
            let mut params: Vec<&mut [f64]> = vec![&mut cond.weight, &mut cond.bias];
            let mut grads: Vec<&[f64]> = vec![&step.weight, &step.bias];
            if let Some((gp, gr, gs)) = step.base.as_mut() {
                params.extend([
                    maps.base_position.as_mut_slice(),
                    maps.base_rotation.as_mut_slice(),
                    maps.base_scale.as_mut_slice(),
                ]);
                grads.extend([gp.as_slice(), gr.as_slice(), gs.as_slice()]);
            }
            let skipped = adam.step(&mut params, &grads)?;
            if skipped > 0 {
                log::warn!("iteration {it}: skipped {skipped} tensor updates with non-finite gradients");
            }
        }

        if config.checkpoint_every > 0 && (it + 1) % config.checkpoint_every == 0 {
            avatar.sync_appearance()?;
            if let Some(p) = observer.checkpoint(avatar, &adam)? {
                last_good = Some(p);
            }
        }
    }

    avatar.sync_appearance()?;
    let holdout_eval = evaluate(avatar, dataset, &holdout, config)?;
    Ok(FitSummary {
        steps: adam.step,
        holdout: holdout_eval,
        skipped_updates: adam.skipped,
        optimizer: adam,
    })
}
