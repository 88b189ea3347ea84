//! The full chain from a driving signal to pixels: mixed feature,
//! conditioner, canonical corrections, skinning and splatting, plus the
//! reverse chain used for fitting.

use nalgebra::{Matrix3, Vector3};

use crate::conditioning::{
    build_pose_feature, inject_face_tile, Conditioner, ConditionerConfig, CorrectionMaps, DrivingSignal, FeatureGrid,
    LinearConditioner, PoseEncoder,
};
use crate::error::{Error, Result};
use crate::geometry::{canonical_sign, quat_norm, quat_to_matrix, quat_to_matrix_backward, Quat};
use crate::image::FloatImage;
use crate::mesh::SkinnedMesh;
use crate::skeleton::{blend_transforms, forward_kinematics, rotation_blend, JointTransforms, PoseVector, Skeleton};
use crate::splat::{render_tiled, Camera, RenderOptions, RenderTarget, SceneGradients, Splat, SplatScene};
use crate::uvmap::{init_base_rotation, init_base_scale, rasterize_uv, GaussianMapSet, MIN_SCALE};

/// Canonical maps, skeleton and conditioner of one avatar.
#[derive(Debug, Clone, PartialEq)]
pub struct Avatar {
    pub maps: GaussianMapSet,
    pub skeleton: Skeleton,
    pub conditioner: LinearConditioner,
    encoder: PoseEncoder,
}

/// Per-splat intermediates needed by [`pose_backward`].
#[derive(Debug, Clone)]
struct SplatCache {
    texel: usize,
    blend: Matrix3<f64>,
    /// Linear part applied to rotations (the blend or its nearest rotation).
    rot_blend: Matrix3<f64>,
    q: Quat,
    /// `q = sign * u / |u|` for the unnormalised sum `u`.
    sign: f64,
    norm: f64,
    collapsed: bool,
    scale_clamped: [bool; 3],
}

#[derive(Debug, Clone, Default)]
pub struct PoseCache {
    splats: Vec<SplatCache>,
    /// Splats whose skinning blend was singular.
    pub singular_blends: usize,
    /// Splats whose corrected quaternion collapsed to zero length.
    pub collapsed_rotations: usize,
}

/// Counters reported by [`Avatar::initialize`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InitReport {
    pub valid_pixels: usize,
    pub overlaps: usize,
    /// Degenerate triangles whose texels fell back to the identity rotation.
    pub rotation_fallbacks: usize,
}

impl Avatar {
    /// Rasterizes the mesh into base maps and attaches a fresh conditioner.
    pub fn initialize(
        mesh: &SkinnedMesh,
        skeleton: Skeleton,
        resolution: usize,
        knn: usize,
        config: ConditionerConfig,
    ) -> Result<(Self, InitReport)> {
        mesh.validate(Some(skeleton.joint_count()))?;
        let (mut maps, stats) = rasterize_uv(mesh, resolution)?;
        let rotation_fallbacks = init_base_rotation(&mut maps, mesh)?;
        init_base_scale(&mut maps, knn)?;
        let conditioner = LinearConditioner::new(config, resolution, skeleton.joint_count())?;
        let mut avatar = Avatar::new(maps, skeleton, conditioner)?;
        avatar.sync_appearance()?;
        let report = InitReport {
            valid_pixels: stats.valid_pixels,
            overlaps: stats.overlaps,
            rotation_fallbacks,
        };
        Ok((avatar, report))
    }

    pub fn new(maps: GaussianMapSet, skeleton: Skeleton, conditioner: LinearConditioner) -> Result<Self> {
        if maps.width != maps.height || maps.width != conditioner.resolution {
            return Err(Error::mismatch(
                "conditioner resolution",
                maps.width,
                conditioner.resolution,
            ));
        }
        if conditioner.joint_count != skeleton.joint_count() {
            return Err(Error::mismatch(
                "conditioner joint count",
                skeleton.joint_count(),
                conditioner.joint_count,
            ));
        }
        let j = skeleton.joint_count();
        if let Some(i) = (0..maps.pixel_count()).find(|&i| maps.valid[i] && maps.skin[i].iter().any(|(k, _)| k >= j)) {
            return Err(Error::InvalidArgument(format!(
                "texel {i} is skinned to a joint outside the skeleton"
            )));
        }
        let encoder = PoseEncoder::new(&maps, j, &conditioner.config);
        Ok(Avatar {
            maps,
            skeleton,
            conditioner,
            encoder,
        })
    }

    pub fn encoder(&self) -> &PoseEncoder {
        &self.encoder
    }

    pub fn neutralized_joints(&self) -> &[usize] {
        &self.conditioner.config.neutralized_joints
    }

    /// Validates lengths and zeroes neutralized joints.
    pub fn driving_signal(&self, pose: PoseVector, latent: Vec<f64>) -> Result<DrivingSignal> {
        if pose.theta.len() != self.skeleton.pose_len() {
            return Err(Error::mismatch(
                "pose length",
                self.skeleton.pose_len(),
                pose.theta.len(),
            ));
        }
        if latent.len() != self.conditioner.config.latent_dim {
            return Err(Error::mismatch(
                "expression latent length",
                self.conditioner.config.latent_dim,
                latent.len(),
            ));
        }
        DrivingSignal::new(pose, latent, self.neutralized_joints())
    }

    /// Pre-injection feature and joint transforms for a pose.
    pub fn pose_feature(&self, pose: &PoseVector) -> Result<(FeatureGrid, JointTransforms)> {
        let transforms = forward_kinematics(&self.skeleton, pose)?;
        let feature = build_pose_feature(&self.encoder, &self.conditioner, pose, &self.maps, &transforms);
        Ok((feature, transforms))
    }

    pub fn mixed_feature(&self, pose_feature: &FeatureGrid, latent: &[f64]) -> Result<FeatureGrid> {
        inject_face_tile(
            pose_feature,
            latent,
            &self.conditioner.projector,
            &self.conditioner.config,
        )
    }

    pub fn corrections(&self, mixed: &FeatureGrid) -> Result<CorrectionMaps> {
        self.conditioner.forward(mixed, &self.maps.valid)
    }

    /// Posed Gaussians for a driving signal.
    pub fn posed_scene(&self, signal: &DrivingSignal) -> Result<SplatScene> {
        let (feature, transforms) = self.pose_feature(&signal.pose)?;
        let mixed = self.mixed_feature(&feature, &signal.expression_latent)?;
        let corr = self.corrections(&mixed)?;
        Ok(pose_gaussians(&self.maps, &corr, &transforms).0)
    }

    pub fn render(
        &self,
        signal: &DrivingSignal,
        camera: &Camera,
        background: [f64; 3],
        options: &RenderOptions,
    ) -> Result<RenderTarget> {
        Ok(render_tiled(&self.posed_scene(signal)?, camera, background, options))
    }

    /// Copies the pose-independent opacity and color into the map set.
    pub fn sync_appearance(&mut self) -> Result<()> {
        let feature = FeatureGrid::zeros(self.conditioner.config.feature_res, self.conditioner.config.channels());
        let corr = self.corrections(&feature)?;
        self.maps.opacity_logit = corr.opacity_logit;
        self.maps.color = corr.color;
        Ok(())
    }
}

/// Applies corrections in canonical space, then skins every valid texel.
/// Splats are emitted in row-major texel order.
pub fn pose_gaussians(
    maps: &GaussianMapSet,
    corr: &CorrectionMaps,
    transforms: &JointTransforms,
) -> (SplatScene, PoseCache) {
    let mut scene = SplatScene::default();
    let mut cache = PoseCache::default();
    for i in 0..maps.pixel_count() {
        if !maps.valid[i] {
            continue;
        }
        let (blend, offset) = blend_transforms(&maps.skin[i], transforms);
        let (rot_blend, singular) = rotation_blend(&blend);
        cache.singular_blends += singular as usize;

        let base_q = maps.rotation(i);
        let u: Quat = std::array::from_fn(|k| base_q[k] + corr.delta_rotation[4 * i + k]);
        let norm = quat_norm(&u);
        let (q, sign, collapsed) = if norm < crate::uvmap::DEGENERATE_QUAT {
            (base_q, 1.0, true)
        } else {
            let n = u.map(|v| v / norm);
            let q = canonical_sign(n);
            (q, if q[0] == n[0] { 1.0 } else { -1.0 }, false)
        };
        cache.collapsed_rotations += collapsed as usize;

        let canonical = Vector3::from_fn(|k, _| maps.base_position[3 * i + k] + corr.delta_position[3 * i + k]);
        let raw_scale: [f64; 3] = std::array::from_fn(|k| maps.base_scale[3 * i + k] + corr.delta_scale[3 * i + k]);
        scene.splats.push(Splat {
            position: blend * canonical + offset,
            linear: rot_blend * quat_to_matrix(&q),
            scale: Vector3::from_fn(|k, _| raw_scale[k].max(MIN_SCALE)),
            opacity_logit: corr.opacity_logit[i],
            color: [corr.color[3 * i], corr.color[3 * i + 1], corr.color[3 * i + 2]],
        });
        cache.splats.push(SplatCache {
            texel: i,
            blend,
            rot_blend,
            q,
            sign,
            norm,
            collapsed,
            scale_clamped: raw_scale.map(|s| s < MIN_SCALE),
        });
    }
    (scene, cache)
}

/// Maps splat gradients back onto the correction maps. Texels whose
/// rotation collapsed or whose scale hit the floor get zero gradient in the
/// affected channels.
pub fn pose_backward(maps: &GaussianMapSet, cache: &PoseCache, grads: &SceneGradients) -> CorrectionMaps {
    let mut out = CorrectionMaps::zeros(maps.width);
    for (k, c) in cache.splats.iter().enumerate() {
        let i = c.texel;
        let g_pos = c.blend.transpose() * grads.position[k];
        out.delta_position[3 * i..3 * i + 3].copy_from_slice(g_pos.as_slice());
        if !c.collapsed {
            let g_rot = c.rot_blend.transpose() * grads.linear[k];
            let g_q = quat_to_matrix_backward(&c.q, &g_rot);
            let dot: f64 = (0..4).map(|m| c.q[m] * g_q[m]).sum();
            for m in 0..4 {
                out.delta_rotation[4 * i + m] = c.sign * (g_q[m] - c.q[m] * dot) / c.norm;
            }
        }
        for m in 0..3 {
            if !c.scale_clamped[m] {
                out.delta_scale[3 * i + m] = grads.scale[k][m];
            }
            out.color[3 * i + m] = grads.color[k][m];
        }
        out.opacity_logit[i] = grads.opacity_logit[k];
    }
    out
}

/// Converts an image gradient into correction-map gradients for one frame.
pub fn frame_backward(
    maps: &GaussianMapSet,
    scene: &SplatScene,
    cache: &PoseCache,
    camera: &Camera,
    background: [f64; 3],
    options: &RenderOptions,
    d_image: &FloatImage,
) -> Result<CorrectionMaps> {
    let g = crate::splat::render_backward(scene, camera, background, options, d_image)?;
    Ok(pose_backward(maps, cache, &g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::ConditionerConfig;
    use crate::skeleton::Joint;
    use crate::uvmap::Influences;
    use nalgebra::Matrix4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_avatar(rng: &mut ChaCha8Rng) -> Avatar {
        let res = 8;
        let mut maps = GaussianMapSet::empty(res, res);
        for i in 0..res * res {
            if rng.gen_bool(0.5) {
                maps.valid[i] = true;
                let (x, y) = ((i % res) as f64, (i / res) as f64);
                maps.base_position[3 * i..3 * i + 3].copy_from_slice(&[0.1 * x - 0.35, 0.1 * y - 0.35, 0.0]);
                let q = [
                    1.0,
                    rng.gen_range(-0.3..0.3),
                    rng.gen_range(-0.3..0.3),
                    rng.gen_range(-0.3..0.3),
                ];
                let n = quat_norm(&q);
                maps.base_rotation[4 * i..4 * i + 4].copy_from_slice(&q.map(|v| v / n));
                maps.base_scale[3 * i..3 * i + 3].fill(0.05);
                let w = rng.gen_range(0.0..1.0);
                maps.skin[i] = Influences::from_dense(&[(0, w), (1, 1.0 - w)]);
            }
        }
        let skeleton = Skeleton::new(vec![
            Joint {
                name: "root".into(),
                parent: None,
                rest_translation: [0.0; 3],
            },
            Joint {
                name: "tip".into(),
                parent: Some(0),
                rest_translation: [0.0, 0.2, 0.0],
            },
        ])
        .unwrap();
        let cfg = ConditionerConfig {
            latent_dim: 4,
            theta_channels: 2,
            feature_res: 16,
            pool: 4,
            grid: 4,
            face_tile: 8,
            ..Default::default()
        };
        let mut cond = LinearConditioner::new(cfg, res, 2).unwrap();
        cond.weight.iter_mut().for_each(|w| *w = rng.gen_range(-0.02..0.02));
        for (k, b) in cond.bias.iter_mut().enumerate() {
            *b = if k % 14 == 10 {
                rng.gen_range(0.0..2.0)
            } else {
                rng.gen_range(-0.02..0.02)
            };
        }
        Avatar::new(maps, skeleton, cond).unwrap()
    }

    #[test]
    fn zero_pose_keeps_corrected_canonical_positions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let av = tiny_avatar(&mut rng);
        let pose = PoseVector::zero(&av.skeleton);
        let (feature, transforms) = av.pose_feature(&pose).unwrap();
        let corr = av.corrections(&av.mixed_feature(&feature, &[0.0; 4]).unwrap()).unwrap();
        let (scene, _) = pose_gaussians(&av.maps, &corr, &transforms);
        for (s, i) in scene.splats.iter().zip(av.maps.valid_indices()) {
            for k in 0..3 {
                let c = av.maps.base_position[3 * i + k] + corr.delta_position[3 * i + k];
                assert!((s.position[k] - c).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let av = tiny_avatar(&mut rng);
        let mut pose = PoseVector::zero(&av.skeleton);
        pose.theta = vec![0.3, -0.2, 0.5];
        let (_, transforms) = av.pose_feature(&pose).unwrap();
        let mut corr = CorrectionMaps::zeros(8);
        for v in corr
            .delta_position
            .iter_mut()
            .chain(corr.delta_rotation.iter_mut())
            .chain(corr.delta_scale.iter_mut())
        {
            *v = rng.gen_range(-0.05..0.05);
        }
        corr.opacity_logit
            .iter_mut()
            .for_each(|v| *v = rng.gen_range(-1.0..2.0));
        corr.color.iter_mut().for_each(|v| *v = rng.gen());
        let cam = Camera::new(60.0, 60.0, 16.0, 16.0, 32, 32, {
            let mut m = Matrix4::identity();
            m[(2, 3)] = 1.5;
            m
        })
        .unwrap();
        let opts = RenderOptions::gradient_check();
        let mut w = FloatImage::new(32, 32, 3);
        w.data.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        let loss = |c: &CorrectionMaps| {
            let (scene, _) = pose_gaussians(&av.maps, c, &transforms);
            let img = render_tiled(&scene, &cam, [0.0; 3], &opts);
            img.color.data.iter().zip(&w.data).map(|(a, b)| a * b).sum::<f64>()
        };
        let (scene, cache) = pose_gaussians(&av.maps, &corr, &transforms);
        let g = frame_backward(&av.maps, &scene, &cache, &cam, [0.0; 3], &opts, &w).unwrap();
        let h = 1e-6;
        let texel = av.maps.valid_indices()[3];
        type Field = fn(&mut CorrectionMaps) -> &mut Vec<f64>;
        let fields: [(Field, usize); 5] = [
            (|c| &mut c.delta_position, 3),
            (|c| &mut c.delta_rotation, 4),
            (|c| &mut c.delta_scale, 3),
            (|c| &mut c.opacity_logit, 1),
            (|c| &mut c.color, 3),
        ];
        for (field, width) in fields {
            for m in 0..width {
                let idx = width * texel + m;
                let (mut a, mut b) = (corr.clone(), corr.clone());
                field(&mut a)[idx] += h;
                field(&mut b)[idx] -= h;
                let fd = (loss(&a) - loss(&b)) / (2.0 * h);
                let an = field(&mut g.clone())[idx];
                assert!((fd - an).abs() <= 1e-4 * fd.abs().max(1e-2), "fd {fd} analytic {an}");
            }
        }
    }
}
