//! Driving-signal features and the conditioner that turns them into
//! correction maps.
//!
//! The mixed feature is a `64 x 64 x C` grid. Its channels are a fixed linear
//! reduction of the masked pose embedding, the downsampled posed vertex map,
//! and the global mean and max of the posed vertex map broadcast to every
//! cell. The top-left `32 x 32` quarter is then overwritten with a tile
//! projected from the expression latent.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skeleton::{
    downsample_vertex_map, downsampled_skin_weights, joint_masks, pose_theta_embedding, posed_vertex_map,
    JointTransforms, PoseVector,
};
use crate::splat::sigmoid;
use crate::uvmap::GaussianMapSet;

/// Position (3), rotation (4) and scale (3) corrections.
pub const DELTA_CHANNELS: usize = 10;
/// Delta channels plus opacity logit (1) and color (3).
pub const BIAS_CHANNELS: usize = 14;
/// Channels derived from the posed vertex map: the map itself plus the
/// global mean and max.
pub const GEOMETRY_CHANNELS: usize = 9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConditionerConfig {
    pub latent_dim: usize,
    /// Channels the pose embedding is reduced to.
    pub theta_channels: usize,
    pub feature_res: usize,
    /// Side of the square average-pooling window applied before the linear
    /// map.
    pub pool: usize,
    /// Side of the coarse grid the correction maps are predicted on before
    /// bilinear upsampling.
    pub grid: usize,
    pub face_tile: usize,
    pub mask_threshold: f64,
    /// Joints whose rotation is zeroed in every driving signal.
    pub neutralized_joints: Vec<usize>,
    /// Initial opacity logit of every Gaussian.
    pub initial_opacity_logit: f64,
    /// Seed of the fixed (untrained) reduction and tile projector.
    pub seed: u64,
    /// Output gain of the geometric corrections. Keeps one optimizer step on
    /// a weight or bias a small fraction of a texel's extent.
    pub correction_scale: f64,
}

impl Default for ConditionerConfig {
    fn default() -> Self {
        ConditionerConfig {
            latent_dim: 256,
            theta_channels: 7,
            feature_res: 64,
            pool: 8,
            grid: 16,
            face_tile: 32,
            mask_threshold: crate::skeleton::DEFAULT_MASK_THRESHOLD,
            neutralized_joints: Vec::new(),
            initial_opacity_logit: 0.0,
            seed: 0,
            correction_scale: 0.01,
        }
    }
}

impl ConditionerConfig {
    pub fn channels(&self) -> usize {
        self.theta_channels + GEOMETRY_CHANNELS
    }

    pub fn pooled_res(&self) -> usize {
        self.feature_res / self.pool
    }

    /// Length of the pooled feature vector.
    pub fn pooled_dim(&self) -> usize {
        self.pooled_res() * self.pooled_res() * self.channels()
    }

    /// Side of the coarse face tile; one coarse cell per pooling window.
    pub fn tile_cells(&self) -> usize {
        self.face_tile / self.pool
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("conditioner config: {m}")));
        if self.pool == 0 || !self.feature_res.is_multiple_of(self.pool) {
            return bad("feature_res must be a positive multiple of pool");
        }
        if self.face_tile == 0 || !self.face_tile.is_multiple_of(self.pool) || self.face_tile > self.feature_res {
            return bad("face_tile must be a multiple of pool no larger than feature_res");
        }
        if self.grid == 0 || self.latent_dim == 0 {
            return bad("grid and latent_dim must be positive");
        }
        if !(self.correction_scale.is_finite() && self.correction_scale > 0.0) {
            return bad("correction_scale must be positive");
        }
        if !self.mask_threshold.is_finite() || !self.initial_opacity_logit.is_finite() {
            return bad("thresholds must be finite");
        }
        Ok(())
    }
}

/// Body pose plus an opaque expression latent.
#[derive(Debug, Clone, PartialEq)]
pub struct DrivingSignal {
    pub pose: PoseVector,
    pub expression_latent: Vec<f64>,
}

impl DrivingSignal {
    /// Builds a signal with the neutralized joints zeroed.
    pub fn new(mut pose: PoseVector, expression_latent: Vec<f64>, neutralized: &[usize]) -> Result<Self> {
        if expression_latent.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("expression latent is not finite".into()));
        }
        pose.neutralize(neutralized);
        Ok(DrivingSignal {
            pose,
            expression_latent,
        })
    }
}

/// Row-major `size x size x channels` feature grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub size: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureGrid {
    pub fn zeros(size: usize, channels: usize) -> Self {
        FeatureGrid {
            size,
            channels,
            data: vec![0.0; size * size * channels],
        }
    }

    pub fn cell(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.size + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    /// Per-channel `pool x pool` average pooling, flattened `[y][x][c]`.
    pub fn pooled(&self, pool: usize) -> Vec<f64> {
        let r = self.size / pool;
        let c = self.channels;
        let mut out = vec![0.0; r * r * c];
        let inv = 1.0 / (pool * pool) as f64;
        for y in 0..self.size {
            for x in 0..self.size {
                let o = ((y / pool) * r + x / pool) * c;
                for (k, v) in self.cell(x, y).iter().enumerate() {
                    out[o + k] += v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        out
    }
}

/// Pose-dependent part of the feature, everything except the face tile.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseEncoder {
    pub joint_count: usize,
    /// `[cell][joint - 1]` masks on the feature grid.
    pub masks: Vec<bool>,
}

impl PoseEncoder {
    pub fn new(maps: &GaussianMapSet, joint_count: usize, config: &ConditionerConfig) -> Self {
        let weights = downsampled_skin_weights(maps, joint_count, config.feature_res);
        PoseEncoder {
            joint_count,
            masks: joint_masks(&weights, joint_count, config.mask_threshold),
        }
    }
}

/// Builds the pre-injection feature for one pose.
pub fn build_pose_feature(
    encoder: &PoseEncoder,
    conditioner: &LinearConditioner,
    pose: &PoseVector,
    maps: &GaussianMapSet,
    transforms: &JointTransforms,
) -> FeatureGrid {
    let cfg = &conditioner.config;
    let res = cfg.feature_res;
    let c1 = cfg.theta_channels;
    let channels = cfg.channels();
    let theta_len = 3 * (encoder.joint_count - 1);
    let embedding = pose_theta_embedding(pose, &encoder.masks, encoder.joint_count);
    let pvm = posed_vertex_map(maps, transforms);
    let pvm_small = downsample_vertex_map(maps, &pvm, res);

    let mut mean = [0.0; 3];
    let mut max = [f64::NEG_INFINITY; 3];
    let mut count = 0usize;
    for i in 0..maps.pixel_count() {
        if maps.valid[i] {
            count += 1;
            for k in 0..3 {
                mean[k] += pvm[3 * i + k];
                max[k] = max[k].max(pvm[3 * i + k]);
            }
        }
    }
    if count == 0 {
        max = [0.0; 3];
    } else {
        mean.iter_mut().for_each(|m| *m /= count as f64);
    }

    let mut out = FeatureGrid::zeros(res, channels);
    for p in 0..res * res {
        let e = &embedding[p * theta_len..(p + 1) * theta_len];
        let o = &mut out.data[p * channels..(p + 1) * channels];
        for (k, row) in conditioner
            .theta_reduction
            .chunks_exact(theta_len.max(1))
            .take(c1)
            .enumerate()
        {
            o[k] = row.iter().zip(e).map(|(a, b)| a * b).sum();
        }
        o[c1..c1 + 3].copy_from_slice(&pvm_small[3 * p..3 * p + 3]);
        o[c1 + 3..c1 + 6].copy_from_slice(&mean);
        o[c1 + 6..c1 + 9].copy_from_slice(&max);
    }
    out
}

/// Fixed linear map from the expression latent to a coarse face tile, one
/// value per pooling window and channel.
#[derive(Debug, Clone, PartialEq)]
pub struct TileProjector {
    pub latent_dim: usize,
    /// `(cells * cells * channels) x latent_dim`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl TileProjector {
    pub fn project(&self, latent: &[f64]) -> Result<Vec<f64>> {
        if latent.len() != self.latent_dim {
            return Err(Error::mismatch(
                "expression latent length",
                self.latent_dim,
                latent.len(),
            ));
        }
        Ok(self
            .weight
            .chunks_exact(self.latent_dim)
            .zip(&self.bias)
            .map(|(row, b)| b + row.iter().zip(latent).map(|(w, l)| w * l).sum::<f64>())
            .collect())
    }
}

/// Replaces the top-left `face_tile x face_tile` cells with the projected
/// latent. Every other value is copied unchanged.
pub fn inject_face_tile(
    pose_feature: &FeatureGrid,
    latent: &[f64],
    projector: &TileProjector,
    config: &ConditionerConfig,
) -> Result<FeatureGrid> {
    let coarse = projector.project(latent)?;
    let cells = config.tile_cells();
    let c = pose_feature.channels;
    if coarse.len() != cells * cells * c {
        return Err(Error::mismatch("face tile size", cells * cells * c, coarse.len()));
    }
    let mut out = pose_feature.clone();
    for y in 0..config.face_tile {
        for x in 0..config.face_tile {
            let src = ((y / config.pool) * cells + x / config.pool) * c;
            let dst = (y * out.size + x) * c;
            out.data[dst..dst + c].copy_from_slice(&coarse[src..src + c]);
        }
    }
    Ok(out)
}

/// Convex combination of latents; the weights are normalised to sum to one.
pub fn average_expression_latents(latents: &[Vec<f64>], weights: &[f64]) -> Result<Vec<f64>> {
    if latents.is_empty() || latents.len() != weights.len() {
        return Err(Error::mismatch("latent weights", latents.len(), weights.len()));
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::InvalidArgument("latent weights must be non-negative".into()));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidArgument("latent weights are all zero".into()));
    }
    let d = latents[0].len();
    let mut out = vec![0.0; d];
    for (l, w) in latents.iter().zip(weights) {
        if l.len() != d {
            return Err(Error::mismatch("expression latent length", d, l.len()));
        }
        let w = w / total;
        for (o, v) in out.iter_mut().zip(l) {
            *o += w * v;
        }
    }
    Ok(out)
}

/// Uniform(0, 1) weights normalised to sum to one.
pub fn sample_latent_weights(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    loop {
        let w: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let total: f64 = w.iter().sum();
        if total > 0.0 {
            return w.into_iter().map(|v| v / total).collect();
        }
    }
}

/// Per-texel conditioner outputs, laid out like the Gaussian maps.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionMaps {
    pub resolution: usize,
    pub delta_position: Vec<f64>,
    pub delta_rotation: Vec<f64>,
    pub delta_scale: Vec<f64>,
    pub opacity_logit: Vec<f64>,
    pub color: Vec<f64>,
}

impl CorrectionMaps {
    pub fn zeros(resolution: usize) -> Self {
        let n = resolution * resolution;
        CorrectionMaps {
            resolution,
            delta_position: vec![0.0; 3 * n],
            delta_rotation: vec![0.0; 4 * n],
            delta_scale: vec![0.0; 3 * n],
            opacity_logit: vec![0.0; n],
            color: vec![0.0; 3 * n],
        }
    }

    /// Delta channel `k` of texel `i`: position 0..3, rotation 3..7, scale 7..10.
    pub fn delta(&self, i: usize, k: usize) -> f64 {
        match k {
            0..=2 => self.delta_position[3 * i + k],
            3..=6 => self.delta_rotation[4 * i + k - 3],
            _ => self.delta_scale[3 * i + k - 7],
        }
    }

    fn delta_mut(&mut self, i: usize, k: usize) -> &mut f64 {
        match k {
            0..=2 => &mut self.delta_position[3 * i + k],
            3..=6 => &mut self.delta_rotation[4 * i + k - 3],
            _ => &mut self.delta_scale[3 * i + k - 7],
        }
    }
}

/// A model from the mixed feature to correction maps.
pub trait Conditioner {
    type Gradient;

    fn forward(&self, feature: &FeatureGrid, valid: &[bool]) -> Result<CorrectionMaps>;

    /// Parameter gradients given dL/d(output maps).
    fn backward(&self, feature: &FeatureGrid, valid: &[bool], upstream: &CorrectionMaps) -> Result<Self::Gradient>;
}

/// One axis of a bilinear upsample: low tap, high tap and the high weight.
#[derive(Debug, Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    t: f64,
}

fn taps(grid: usize, resolution: usize) -> Vec<Tap> {
    (0..resolution)
        .map(|x| {
            let u = ((x as f64 + 0.5) * grid as f64 / resolution as f64 - 0.5).clamp(0.0, (grid - 1) as f64);
            let lo = u.floor() as usize;
            Tap {
                lo,
                hi: (lo + 1).min(grid - 1),
                t: u - lo as f64,
            }
        })
        .collect()
}

/// Linear map from the pooled mixed feature to a coarse correction grid,
/// bilinearly upsampled and added to full-resolution bias maps. Opacity and
/// color come from the bias maps only.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearConditioner {
    pub config: ConditionerConfig,
    pub resolution: usize,
    pub joint_count: usize,
    /// Fixed `theta_channels x 3(J-1)` reduction of the pose embedding.
    pub theta_reduction: Vec<f64>,
    pub projector: TileProjector,
    /// `(grid * grid * 10) x pooled_dim`, row-major.
    pub weight: Vec<f64>,
    /// `resolution * resolution * 14`: delta channels, opacity logit, color
    /// pre-activation.
    pub bias: Vec<f64>,
}

/// Gradient with the shapes of the trainable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearConditionerGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearConditioner {
    /// Fresh conditioner: seeded fixed parts, zero weights, zero corrections,
    /// mid-gray color and the configured opacity.
    pub fn new(config: ConditionerConfig, resolution: usize, joint_count: usize) -> Result<Self> {
        config.validate()?;
        if joint_count == 0 {
            return Err(Error::InvalidArgument("skeleton has no joints".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let theta_len = 3 * (joint_count - 1);
        let r_scale = 1.0 / (theta_len.max(1) as f64).sqrt();
        let theta_reduction = (0..config.theta_channels * theta_len)
            .map(|_| rng.gen_range(-1.0..1.0) * r_scale)
            .collect();
        let tile = config.tile_cells() * config.tile_cells() * config.channels();
        let p_scale = 1.0 / (config.latent_dim as f64).sqrt();
        let projector = TileProjector {
            latent_dim: config.latent_dim,
            weight: (0..tile * config.latent_dim)
                .map(|_| rng.gen_range(-1.0..1.0) * p_scale)
                .collect(),
            bias: vec![0.0; tile],
        };
        let n = resolution * resolution;
        let mut bias = vec![0.0; n * BIAS_CHANNELS];
        for i in 0..n {
            bias[i * BIAS_CHANNELS + DELTA_CHANNELS] = config.initial_opacity_logit;
        }
        Ok(LinearConditioner {
            weight: vec![0.0; config.grid * config.grid * DELTA_CHANNELS * config.pooled_dim()],
            config,
            resolution,
            joint_count,
            theta_reduction,
            projector,
            bias,
        })
    }

    pub fn zero_grad(&self) -> LinearConditionerGrad {
        LinearConditionerGrad {
            weight: vec![0.0; self.weight.len()],
            bias: vec![0.0; self.bias.len()],
        }
    }

    /// Indices into the pooled feature that lie inside the face tile.
    pub fn face_tile_inputs(&self) -> Vec<usize> {
        let cfg = &self.config;
        let (r, cells, c) = (cfg.pooled_res(), cfg.tile_cells(), cfg.channels());
        let mut out = Vec::new();
        for y in 0..cells {
            for x in 0..cells {
                out.extend((0..c).map(|k| (y * r + x) * c + k));
            }
        }
        out
    }

    fn check_feature(&self, feature: &FeatureGrid, valid: &[bool]) -> Result<()> {
        let cfg = &self.config;
        if feature.size != cfg.feature_res || feature.channels != cfg.channels() {
            return Err(Error::mismatch(
                "mixed feature size",
                cfg.feature_res * cfg.feature_res * cfg.channels(),
                feature.data.len(),
            ));
        }
        if valid.len() != self.resolution * self.resolution {
            return Err(Error::mismatch(
                "valid mask length",
                self.resolution * self.resolution,
                valid.len(),
            ));
        }
        Ok(())
    }

    /// Coarse `grid x grid x 10` prediction from a pooled feature, before
    /// the gain.
    pub fn coarse(&self, pooled: &[f64]) -> Vec<f64> {
        self.weight
            .chunks_exact(pooled.len())
            .map(|row| row.iter().zip(pooled).map(|(w, f)| w * f).sum())
            .collect()
    }

    /// Gains applied to the coarse prediction and to the delta bias.
    pub fn gains(&self) -> (f64, f64) {
        let k = self.config.correction_scale;
        (k / (self.config.pooled_dim() as f64).sqrt(), k)
    }
}

impl Conditioner for LinearConditioner {
    type Gradient = LinearConditionerGrad;

    fn forward(&self, feature: &FeatureGrid, valid: &[bool]) -> Result<CorrectionMaps> {
        self.check_feature(feature, valid)?;
        let grid = self.config.grid;
        let coarse = self.coarse(&feature.pooled(self.config.pool));
        let (gw, gb) = self.gains();
        let taps = taps(grid, self.resolution);
        let mut out = CorrectionMaps::zeros(self.resolution);
        for (y, ty) in taps.iter().enumerate() {
            for (x, tx) in taps.iter().enumerate() {
                let i = y * self.resolution + x;
                if !valid[i] {
                    continue;
                }
                let b = &self.bias[i * BIAS_CHANNELS..(i + 1) * BIAS_CHANNELS];
                let corners = [
                    (ty.lo * grid + tx.lo, (1.0 - ty.t) * (1.0 - tx.t)),
                    (ty.lo * grid + tx.hi, (1.0 - ty.t) * tx.t),
                    (ty.hi * grid + tx.lo, ty.t * (1.0 - tx.t)),
                    (ty.hi * grid + tx.hi, ty.t * tx.t),
                ];
                for k in 0..DELTA_CHANNELS {
                    let v: f64 = corners.iter().map(|(c, w)| w * coarse[c * DELTA_CHANNELS + k]).sum();
                    *out.delta_mut(i, k) = gw * v + gb * b[k];
                }
                out.opacity_logit[i] = b[DELTA_CHANNELS];
                for k in 0..3 {
                    out.color[3 * i + k] = sigmoid(b[DELTA_CHANNELS + 1 + k]);
                }
            }
        }
        Ok(out)
    }

    fn backward(
        &self,
        feature: &FeatureGrid,
        valid: &[bool],
        upstream: &CorrectionMaps,
    ) -> Result<LinearConditionerGrad> {
        self.check_feature(feature, valid)?;
        if upstream.resolution != self.resolution {
            return Err(Error::mismatch(
                "correction gradient resolution",
                self.resolution,
                upstream.resolution,
            ));
        }
        let grid = self.config.grid;
        let pooled = feature.pooled(self.config.pool);
        let taps = taps(grid, self.resolution);
        let (gw, gbias) = self.gains();
        let mut grad = self.zero_grad();
        let mut g_coarse = vec![0.0; grid * grid * DELTA_CHANNELS];
        for (y, ty) in taps.iter().enumerate() {
            for (x, tx) in taps.iter().enumerate() {
                let i = y * self.resolution + x;
                if !valid[i] {
                    continue;
                }
                let corners = [
                    (ty.lo * grid + tx.lo, (1.0 - ty.t) * (1.0 - tx.t)),
                    (ty.lo * grid + tx.hi, (1.0 - ty.t) * tx.t),
                    (ty.hi * grid + tx.lo, ty.t * (1.0 - tx.t)),
                    (ty.hi * grid + tx.hi, ty.t * tx.t),
                ];
                let gb = &mut grad.bias[i * BIAS_CHANNELS..(i + 1) * BIAS_CHANNELS];
                for k in 0..DELTA_CHANNELS {
                    let g = upstream.delta(i, k);
                    gb[k] = gbias * g;
                    for (c, w) in &corners {
                        g_coarse[c * DELTA_CHANNELS + k] += gw * w * g;
                    }
                }
                gb[DELTA_CHANNELS] = upstream.opacity_logit[i];
                for k in 0..3 {
                    let s = sigmoid(self.bias[i * BIAS_CHANNELS + DELTA_CHANNELS + 1 + k]);
                    gb[DELTA_CHANNELS + 1 + k] = upstream.color[3 * i + k] * s * (1.0 - s);
                }
            }
        }
        let d = pooled.len();
        for (row, g) in grad.weight.chunks_exact_mut(d).zip(&g_coarse) {
            if *g != 0.0 {
                for (o, f) in row.iter_mut().zip(&pooled) {
                    *o = g * f;
                }
            }
        }
        Ok(grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ConditionerConfig {
        ConditionerConfig {
            latent_dim: 8,
            theta_channels: 2,
            feature_res: 16,
            pool: 4,
            grid: 4,
            face_tile: 8,
            ..Default::default()
        }
    }

    fn random_feature(rng: &mut ChaCha8Rng, cfg: &ConditionerConfig) -> FeatureGrid {
        let mut f = FeatureGrid::zeros(cfg.feature_res, cfg.channels());
        f.data.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        f
    }

    #[test]
    fn default_dimensions() {
        let cfg = ConditionerConfig::default();
        assert_eq!(cfg.channels(), 16);
        assert_eq!(cfg.pooled_dim(), 1024);
        assert_eq!(cfg.tile_cells(), 4);
    }

    #[test]
    fn injection_replaces_only_the_top_left_quarter() {
        let cfg = small_config();
        let cond = LinearConditioner::new(cfg.clone(), 8, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = random_feature(&mut rng, &cfg);
        let latent: Vec<f64> = (0..8).map(|_| rng.gen()).collect();
        let g = inject_face_tile(&f, &latent, &cond.projector, &cfg).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                let inside = x < 8 && y < 8;
                assert_eq!(g.cell(x, y) == f.cell(x, y), !inside, "cell {x},{y}");
            }
        }
        // block-constant tile
        assert_eq!(g.cell(0, 0), g.cell(3, 3));
        assert_ne!(g.cell(0, 0), g.cell(4, 0));
    }

    #[test]
    fn zero_latent_gives_zero_tile() {
        let cfg = small_config();
        let cond = LinearConditioner::new(cfg.clone(), 8, 2).unwrap();
        let f = FeatureGrid {
            data: vec![3.0; 16 * 16 * cfg.channels()],
            ..FeatureGrid::zeros(16, cfg.channels())
        };
        let g = inject_face_tile(&f, &[0.0; 8], &cond.projector, &cfg).unwrap();
        assert!(g.cell(7, 7).iter().all(|&v| v == 0.0));
        assert!(g.cell(8, 7).iter().all(|&v| v == 3.0));
    }

    #[test]
    fn wrong_latent_length_is_rejected() {
        let cfg = small_config();
        let cond = LinearConditioner::new(cfg.clone(), 8, 2).unwrap();
        let f = FeatureGrid::zeros(16, cfg.channels());
        match inject_face_tile(&f, &[0.0; 5], &cond.projector, &cfg) {
            Err(Error::DimensionMismatch { expected, actual, .. }) => assert_eq!((expected, actual), (8, 5)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn latent_averaging() {
        let e1 = vec![1.0, 0.0];
        let e2 = vec![0.0, 1.0];
        assert_eq!(
            average_expression_latents(&[e1.clone(), e2.clone()], &[0.25, 0.75]).unwrap(),
            vec![0.25, 0.75]
        );
        let four = vec![e1.clone(), e2.clone(), e2.clone(), e2.clone()];
        assert_eq!(average_expression_latents(&four, &[1.0, 0.0, 0.0, 0.0]).unwrap(), e1);
        let same = vec![vec![0.3, -0.7]; 3];
        let w = sample_latent_weights(&mut ChaCha8Rng::seed_from_u64(5), 3);
        let avg = average_expression_latents(&same, &w).unwrap();
        assert!((avg[0] - 0.3).abs() < 1e-15 && (avg[1] + 0.7).abs() < 1e-15);
        assert!(average_expression_latents(&[e1, e2], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn zero_conditioner_outputs_zero_and_gray() {
        let cfg = small_config();
        let cond = LinearConditioner::new(cfg.clone(), 8, 2).unwrap();
        let f = random_feature(&mut ChaCha8Rng::seed_from_u64(2), &cfg);
        let mut valid = vec![true; 64];
        valid[5] = false;
        let out = cond.forward(&f, &valid).unwrap();
        assert!(out
            .delta_position
            .iter()
            .chain(&out.delta_rotation)
            .chain(&out.delta_scale)
            .all(|&v| v == 0.0));
        assert!(out.opacity_logit.iter().all(|&v| v == 0.0));
        for i in 0..64 {
            let expect = if i == 5 { 0.0 } else { 0.5 };
            assert!(out.color[3 * i..3 * i + 3].iter().all(|&v| v == expect));
        }
    }

    #[test]
    fn face_locality_with_masked_weights() {
        let cfg = small_config();
        let mut cond = LinearConditioner::new(cfg.clone(), 8, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        cond.weight.iter_mut().for_each(|w| *w = rng.gen_range(-1.0..1.0));
        let d = cfg.pooled_dim();
        for k in cond.face_tile_inputs() {
            for row in cond.weight.chunks_exact_mut(d) {
                row[k] = 0.0;
            }
        }
        let f = random_feature(&mut rng, &cfg);
        let l1: Vec<f64> = (0..8).map(|_| rng.gen()).collect();
        let l2: Vec<f64> = (0..8).map(|_| rng.gen()).collect();
        let valid = vec![true; 64];
        let a = cond
            .forward(&inject_face_tile(&f, &l1, &cond.projector, &cfg).unwrap(), &valid)
            .unwrap();
        let b = cond
            .forward(&inject_face_tile(&f, &l2, &cond.projector, &cfg).unwrap(), &valid)
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn forward_is_linear_in_the_feature() {
        let cfg = small_config();
        let mut cond = LinearConditioner::new(cfg.clone(), 8, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        cond.weight.iter_mut().for_each(|w| *w = rng.gen_range(-1.0..1.0));
        cond.bias.iter_mut().for_each(|b| *b = 0.0);
        let valid = vec![true; 64];
        let f1 = random_feature(&mut rng, &cfg);
        let f2 = random_feature(&mut rng, &cfg);
        let mut sum = f1.clone();
        for (s, v) in sum.data.iter_mut().zip(&f2.data) {
            *s = 2.0 * *s + 3.0 * v;
        }
        let (a, b, c) = (
            cond.forward(&f1, &valid).unwrap(),
            cond.forward(&f2, &valid).unwrap(),
            cond.forward(&sum, &valid).unwrap(),
        );
        for i in 0..c.delta_position.len() {
            let expect = 2.0 * a.delta_position[i] + 3.0 * b.delta_position[i];
            assert!((c.delta_position[i] - expect).abs() <= 1e-9 * expect.abs().max(1.0));
        }
    }

    fn weighted_sum(out: &CorrectionMaps, w: &CorrectionMaps) -> f64 {
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        dot(&out.delta_position, &w.delta_position)
            + dot(&out.delta_rotation, &w.delta_rotation)
            + dot(&out.delta_scale, &w.delta_scale)
            + dot(&out.opacity_logit, &w.opacity_logit)
            + dot(&out.color, &w.color)
    }

    #[test]
    fn backward_matches_finite_differences() {
        let cfg = small_config();
        let mut cond = LinearConditioner::new(cfg.clone(), 8, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        cond.weight.iter_mut().for_each(|w| *w = rng.gen_range(-0.1..0.1));
        cond.bias.iter_mut().for_each(|b| *b = rng.gen_range(-1.0..1.0));
        let f = random_feature(&mut rng, &cfg);
        let valid: Vec<bool> = (0..64).map(|i| i % 7 != 3).collect();
        let mut up = CorrectionMaps::zeros(8);
        for v in up
            .delta_position
            .iter_mut()
            .chain(up.delta_rotation.iter_mut())
            .chain(up.delta_scale.iter_mut())
            .chain(up.opacity_logit.iter_mut())
            .chain(up.color.iter_mut())
        {
            *v = rng.gen_range(-1.0..1.0);
        }
        let g = cond.backward(&f, &valid, &up).unwrap();
        let h = 1e-5;
        for _ in 0..40 {
            let k = rng.gen_range(0..cond.weight.len());
            let (mut a, mut b) = (cond.clone(), cond.clone());
            a.weight[k] += h;
            b.weight[k] -= h;
            let fd = (weighted_sum(&a.forward(&f, &valid).unwrap(), &up)
                - weighted_sum(&b.forward(&f, &valid).unwrap(), &up))
                / (2.0 * h);
            assert!((fd - g.weight[k]).abs() < 1e-6 * fd.abs().max(1.0));
        }
        for k in 0..cond.bias.len() {
            let (mut a, mut b) = (cond.clone(), cond.clone());
            a.bias[k] += h;
            b.bias[k] -= h;
            let fd = (weighted_sum(&a.forward(&f, &valid).unwrap(), &up)
                - weighted_sum(&b.forward(&f, &valid).unwrap(), &up))
                / (2.0 * h);
            assert!((fd - g.bias[k]).abs() < 1e-6 * fd.abs().max(1.0), "bias {k}");
        }
    }

    #[test]
    fn color_gradient_uses_sigmoid_slope_at_zero() {
        let cfg = small_config();
        let cond = LinearConditioner::new(cfg.clone(), 8, 2).unwrap();
        let f = FeatureGrid::zeros(16, cfg.channels());
        let valid = vec![true; 64];
        let mut up = CorrectionMaps::zeros(8);
        up.color[0] = 1.0;
        let g = cond.backward(&f, &valid, &up).unwrap();
        assert_eq!(g.bias[DELTA_CHANNELS + 1], 0.25);
        let zero = cond.backward(&f, &valid, &CorrectionMaps::zeros(8)).unwrap();
        assert!(zero.weight.iter().chain(&zero.bias).all(|&v| v == 0.0));
    }

    #[test]
    fn single_pixel_gradient_is_an_outer_product_row() {
        let cfg = small_config();
        let cond = LinearConditioner::new(cfg.clone(), 4, 2).unwrap();
        let f = random_feature(&mut ChaCha8Rng::seed_from_u64(6), &cfg);
        // map resolution equals grid: upsampling is the identity
        let valid = vec![true; 16];
        let mut up = CorrectionMaps::zeros(4);
        up.delta_position[3 * 5 + 1] = 2.0;
        let g = cond.backward(&f, &valid, &up).unwrap();
        let pooled = f.pooled(cfg.pool);
        let d = pooled.len();
        let row = 5 * DELTA_CHANNELS + 1;
        let s = cond.gains().0 * 2.0;
        for (k, p) in pooled.iter().enumerate() {
            assert_eq!(g.weight[row * d + k], s * p);
        }
        assert_eq!(
            g.weight.iter().filter(|&&v| v != 0.0).count(),
            pooled.iter().filter(|&&v| v != 0.0).count()
        );
    }
}
