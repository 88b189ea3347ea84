//! Procedural datasets rendered from a hidden ground-truth conditioner, for
//! checking that fitting recovers what the engine itself produced.

use std::f64::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{FeatureGrid, LinearConditioner, BIAS_CHANNELS, DELTA_CHANNELS};
use crate::error::{Error, Result};
use crate::io::{save_avatar, save_camera, save_latent, save_pose, Config, ManifestEntry};
use crate::mesh::SkinnedMesh;
use crate::pipeline::Avatar;
use crate::skeleton::{Joint, PoseVector, Skeleton};
use crate::splat::{render_tiled, Camera, RenderOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    TwoBoneCapsule,
    ThreeJointHumanoidStub,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two_bone_capsule" => Ok(Preset::TwoBoneCapsule),
            "three_joint_humanoid_stub" => Ok(Preset::ThreeJointHumanoidStub),
            _ => Err(Error::InvalidArgument(format!(
                "unknown preset {s} (expected two_bone_capsule or three_joint_humanoid_stub)"
            ))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::TwoBoneCapsule => "two_bone_capsule",
            Preset::ThreeJointHumanoidStub => "three_joint_humanoid_stub",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub preset: Preset,
    pub views: usize,
    pub frames: usize,
    /// Side of the square target images.
    pub image_size: usize,
    /// Side of the Gaussian maps of the generated avatars.
    pub resolution: usize,
    pub seed: u64,
    /// RMS of the hidden position corrections, in meters.
    pub position_rms: f64,
    /// RMS of the hidden quaternion corrections.
    pub rotation_rms: f64,
    /// RMS of the hidden scale corrections relative to the mean base scale.
    pub scale_rms: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            preset: Preset::TwoBoneCapsule,
            views: 8,
            frames: 20,
            image_size: 256,
            resolution: 128,
            seed: 0,
            position_rms: 0.002,
            rotation_rms: 0.02,
            scale_rms: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthSummary {
    pub samples: usize,
    pub valid_pixels: usize,
}

const AROUND: usize = 64;
const ALONG: usize = 64;

/// Capsule around the y axis between `y0` and `y1`, charted onto the UV
/// rectangle `[u0, v0, u1, v1]` with its top at `v0`.
fn add_capsule(
    mesh: &mut SkinnedMesh,
    y0: f64,
    y1: f64,
    radius: f64,
    rect: [f64; 4],
    weights: impl Fn(f64) -> Vec<(usize, f64)>,
) {
    let cyl = (y1 - y0 - 2.0 * radius).max(0.0);
    let cap = 0.5 * PI * radius;
    let total = 2.0 * cap + cyl;
    let profile = |s: f64| -> (f64, f64) {
        if s < cap {
            let a = s / radius;
            (radius * a.sin(), y0 + radius - radius * a.cos())
        } else if s <= cap + cyl {
            (radius, y0 + radius + (s - cap))
        } else {
            let a = (s - cap - cyl) / radius;
            (radius * a.cos(), y1 - radius + radius * a.sin())
        }
    };
    let base = mesh.vertices.len();
    let mut index = vec![vec![0usize; AROUND]; ALONG + 1];
    for (j, row) in index.iter_mut().enumerate() {
        let (rho, y) = profile(total * j as f64 / ALONG as f64);
        let pole = j == 0 || j == ALONG;
        for (k, slot) in row.iter_mut().enumerate() {
            if pole && k > 0 {
                *slot = row_first(base, &mesh.vertices, j, ALONG);
                continue;
            }
            let a = 2.0 * PI * k as f64 / AROUND as f64;
            *slot = mesh.vertices.len();
            mesh.vertices.push(Vector3::new(rho * a.cos(), y, -rho * a.sin()));
            mesh.skin_weights.push(weights(y));
        }
    }
    let [u0, v0, u1, v1] = rect;
    let uv = |j: usize, k: usize| {
        [
            u0 + (u1 - u0) * k as f64 / AROUND as f64,
            v1 - (v1 - v0) * j as f64 / ALONG as f64,
        ]
    };
    for j in 0..ALONG {
        for k in 0..AROUND {
            let v = |jj: usize, kk: usize| index[jj][kk % AROUND];
            if j > 0 {
                mesh.triangles.push([v(j, k), v(j + 1, k + 1), v(j, k + 1)]);
                mesh.uv_coords.push([uv(j, k), uv(j + 1, k + 1), uv(j, k + 1)]);
            }
            if j + 1 < ALONG {
                mesh.triangles.push([v(j, k), v(j + 1, k), v(j + 1, k + 1)]);
                mesh.uv_coords.push([uv(j, k), uv(j + 1, k), uv(j + 1, k + 1)]);
            }
        }
    }
}

/// Index of the single vertex of a pole ring, which is the first one
/// pushed for that ring.
fn row_first(base: usize, vertices: &[Vector3<f64>], j: usize, along: usize) -> usize {
    if j == 0 {
        base
    } else {
        debug_assert_eq!(j, along);
        vertices.len() - 1
    }
}

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Two joints blending smoothly around `y_mid`.
fn blend_pair(a: usize, b: usize, y_mid: f64, width: f64) -> impl Fn(f64) -> Vec<(usize, f64)> {
    move |y| {
        let t = smoothstep((y - y_mid) / width + 0.5);
        let mut out = Vec::new();
        if t < 1.0 {
            out.push((a, 1.0 - t));
        }
        if t > 0.0 {
            out.push((b, t));
        }
        out
    }
}

fn joint(name: &str, parent: Option<usize>, y: f64) -> Joint {
    Joint {
        name: name.into(),
        parent,
        rest_translation: [0.0, y, 0.0],
    }
}

/// Procedural mesh and skeleton of a preset.
pub fn preset_mesh(preset: Preset) -> Result<(SkinnedMesh, Skeleton)> {
    let mut mesh = SkinnedMesh::default();
    let skeleton = match preset {
        Preset::TwoBoneCapsule => {
            add_capsule(
                &mut mesh,
                0.0,
                1.0,
                0.15,
                [0.0, 0.0, 1.0, 1.0],
                blend_pair(0, 1, 0.5, 0.3),
            );
            Skeleton::new(vec![joint("root", None, 0.0), joint("bone", Some(0), 0.5)])?
        }
        Preset::ThreeJointHumanoidStub => {
            add_capsule(
                &mut mesh,
                0.0,
                1.0,
                0.15,
                [0.0, 0.5, 1.0, 1.0],
                blend_pair(0, 1, 0.5, 0.3),
            );
            add_capsule(&mut mesh, 1.1, 1.34, 0.12, [0.0, 0.0, 0.5, 0.5], |_| vec![(2, 1.0)]);
            Skeleton::new(vec![
                joint("pelvis", None, 0.0),
                joint("spine", Some(0), 0.5),
                joint("head", Some(1), 0.55),
            ])?
        }
    };
    mesh.validate(Some(skeleton.joint_count()))?;
    Ok((mesh, skeleton))
}

/// Cameras evenly spaced on a horizontal ring, slightly above and looking
/// at the middle of the points' bounding box.
pub fn ring_cameras(points: &[Vector3<f64>], views: usize, size: usize) -> Result<Vec<Camera>> {
    if points.is_empty() {
        return Err(Error::InvalidArgument("cannot frame an empty point set".into()));
    }
    let (lo, hi) = points.iter().fold(
        (Vector3::repeat(f64::INFINITY), Vector3::repeat(f64::NEG_INFINITY)),
        |(lo, hi), v| (lo.inf(v), hi.sup(v)),
    );
    let target = 0.5 * (lo + hi);
    let half = 0.5 * (hi - lo).max();
    let distance = 3.2;
    let fov = 2.0 * (1.35 * half / distance).atan();
    (0..views)
        .map(|v| {
            let a = 2.0 * PI * v as f64 / views as f64;
            let eye = target + Vector3::new(distance * a.sin(), 0.4, distance * a.cos());
            Camera::look_at(eye, target, Vector3::y(), fov, size, size)
        })
        .collect()
}

fn random_pose(rng: &mut impl Rng, skeleton: &Skeleton) -> PoseVector {
    let mut pose = PoseVector::zero(skeleton);
    for j in 0..skeleton.joint_count() - 1 {
        pose.theta[3 * j] = rng.gen_range(-0.5..0.5);
        pose.theta[3 * j + 1] = rng.gen_range(-0.3..0.3);
        pose.theta[3 * j + 2] = rng.gen_range(-0.5..0.5);
    }
    pose
}

fn random_latent(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    let a = 3f64.sqrt();
    (0..d).map(|_| rng.gen_range(-a..a)).collect()
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Ground truth: smooth color and opacity bias maps plus a random weight
/// calibrated so the corrections over `features` have the configured RMS.
fn hidden_conditioner(
    avatar: &Avatar,
    features: &[FeatureGrid],
    config: &SynthConfig,
    rng: &mut impl Rng,
) -> Result<LinearConditioner> {
    let maps = &avatar.maps;
    let mut cond = avatar.conditioner.clone();
    let phase: [f64; 6] = std::array::from_fn(|_| rng.gen_range(0.0..2.0 * PI));
    for i in maps.valid_indices() {
        let p = maps.position(i);
        let a = p.z.atan2(p.x);
        let b = &mut cond.bias[i * BIAS_CHANNELS..(i + 1) * BIAS_CHANNELS];
        b[DELTA_CHANNELS] = 3.0 + (4.0 * p.y + a).sin();
        for k in 0..3 {
            let c =
                0.5 + 0.25 * (2.0 * a + 6.0 * p.y + phase[k]).sin() + 0.15 * (3.0 * a - 4.0 * p.y + phase[3 + k]).sin();
            b[DELTA_CHANNELS + 1 + k] = logit(c);
        }
    }
    cond.weight.iter_mut().for_each(|w| *w = rng.gen_range(-1.0..1.0));

    let valid = maps.valid_indices();
    let mean_scale = valid.iter().map(|&i| maps.base_scale[3 * i]).sum::<f64>() / valid.len().max(1) as f64;
    let groups: [(std::ops::Range<usize>, f64); 3] = [
        (0..3, config.position_rms),
        (3..7, config.rotation_rms),
        (7..10, config.scale_rms * mean_scale),
    ];
    let mut sums = [0.0; 3];
    let mut counts = [0usize; 3];
    for f in features {
        let corr = avatar_with(avatar, &cond)?.corrections(f)?;
        for &i in &valid {
            for (g, (range, _)) in groups.iter().enumerate() {
                for k in range.clone() {
                    sums[g] += corr.delta(i, k).powi(2);
                    counts[g] += 1;
                }
            }
        }
    }
    for (row, w) in cond.weight.chunks_exact_mut(cond.config.pooled_dim()).enumerate() {
        let k = row % DELTA_CHANNELS;
        let g = groups.iter().position(|(r, _)| r.contains(&k)).unwrap();
        let rms = (sums[g] / counts[g].max(1) as f64).sqrt();
        let gain = if rms > 0.0 { groups[g].1 / rms } else { 0.0 };
        w.iter_mut().for_each(|v| *v *= gain);
    }
    Ok(cond)
}

fn avatar_with(avatar: &Avatar, cond: &LinearConditioner) -> Result<Avatar> {
    Avatar::new(avatar.maps.clone(), avatar.skeleton.clone(), cond.clone())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    crate::io::write(path, text.as_bytes())
}

/// Writes a complete dataset under `out`: the mesh inputs, the initial and
/// ground-truth avatars, per-sample files, `manifest.json` and the
/// `config.json` to fit it with.
pub fn generate(config: &Config, out: &Path) -> Result<SynthSummary> {
    let sc = &config.synth;
    if sc.views == 0 || sc.frames == 0 || sc.image_size == 0 {
        return Err(Error::InvalidArgument(
            "views, frames and image_size must be positive".into(),
        ));
    }
    let (mesh, skeleton) = preset_mesh(sc.preset)?;
    let (avatar, report) = Avatar::initialize(
        &mesh,
        skeleton.clone(),
        sc.resolution,
        config.knn,
        config.conditioner.clone(),
    )?;

    let mut rng = ChaCha8Rng::seed_from_u64(sc.seed);
    let poses: Vec<PoseVector> = (0..sc.frames).map(|_| random_pose(&mut rng, &skeleton)).collect();
    let latents: Vec<Vec<f64>> = (0..sc.frames)
        .map(|_| random_latent(&mut rng, config.conditioner.latent_dim))
        .collect();
    let signals = poses
        .iter()
        .zip(&latents)
        .map(|(p, z)| avatar.driving_signal(p.clone(), z.clone()))
        .collect::<Result<Vec<_>>>()?;
    let features = signals
        .iter()
        .map(|s| {
            let (f, _) = avatar.pose_feature(&s.pose)?;
            avatar.mixed_feature(&f, &s.expression_latent)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut truth = avatar_with(&avatar, &hidden_conditioner(&avatar, &features, sc, &mut rng)?)?;
    truth.sync_appearance()?;

    write_text(&out.join("mesh.obj"), &mesh.to_obj())?;
    write_text(&out.join("weights.json"), &mesh.skin_weights_json())?;
    write_text(&out.join("skeleton.json"), &skeleton.to_json())?;
    save_avatar(&avatar, &out.join("avatar"))?;
    save_avatar(&truth, &out.join("truth"))?;

    let cameras = ring_cameras(&mesh.vertices, sc.views, sc.image_size)?;
    for (v, cam) in cameras.iter().enumerate() {
        save_camera(cam, &out.join(camera_file(v)))?;
    }
    let options = RenderOptions::default();
    let mut entries = Vec::new();
    for (f, signal) in signals.iter().enumerate() {
        let pose_path = PathBuf::from(format!("poses/frame{f:03}.json"));
        let latent_path = PathBuf::from(format!("latents/frame{f:03}.bin"));
        save_pose(&poses[f], &out.join(&pose_path))?;
        save_latent(&latents[f], &out.join(&latent_path))?;
        let scene = truth.posed_scene(signal)?;
        for (v, cam) in cameras.iter().enumerate() {
            let image_path = PathBuf::from(format!("images/frame{f:03}_view{v:02}.raw"));
            render_tiled(&scene, cam, config.fit.background, &options)
                .color
                .save_raw(&out.join(&image_path))?;
            entries.push(ManifestEntry {
                image_path,
                camera_path: camera_file(v),
                pose_path: pose_path.clone(),
                latent_path: latent_path.clone(),
                mask_path: None,
                frame: Some(f),
                view: Some(v),
            });
        }
    }
    write_text(
        &out.join("manifest.json"),
        &serde_json::to_string_pretty(&entries).expect("manifest serialises"),
    )?;
    let mut fit_config = config.clone();
    fit_config.resolution = sc.resolution;
    fit_config.manifest = Some(PathBuf::from("manifest.json"));
    write_text(
        &out.join("config.json"),
        &serde_json::to_string_pretty(&fit_config).expect("config serialises"),
    )?;
    Ok(SynthSummary {
        samples: entries.len(),
        valid_pixels: report.valid_pixels,
    })
}

fn camera_file(v: usize) -> PathBuf {
    PathBuf::from(format!("cameras/view{v:02}.json"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn capsule_mesh_is_valid_and_closed_in_uv() {
        let (mesh, skel) = preset_mesh(Preset::TwoBoneCapsule).unwrap();
        assert_eq!(skel.joint_count(), 2);
        assert_eq!(mesh.triangles.len(), 2 * AROUND * ALONG - 2 * AROUND);
        let area: f64 = mesh.uv_coords.iter().map(crate::mesh::uv_area).sum();
        assert!((area - (1.0 - 1.0 / ALONG as f64)).abs() < 1e-9, "{area}");
    }

    #[test]
    fn humanoid_head_is_in_the_top_left_quarter() {
        let (mesh, skel) = preset_mesh(Preset::ThreeJointHumanoidStub).unwrap();
        assert_eq!(skel.joint_count(), 3);
        for (t, uv) in mesh.triangles.iter().zip(&mesh.uv_coords) {
            let head = mesh.skin_weights[t[0]].iter().any(|&(j, _)| j == 2);
            let inside = uv.iter().all(|p| p[0] <= 0.5 && p[1] <= 0.5);
            assert_eq!(head, inside);
        }
    }

    #[test]
    fn ring_cameras_see_the_centre() {
        let (mesh, _) = preset_mesh(Preset::TwoBoneCapsule).unwrap();
        let cams = ring_cameras(&mesh.vertices, 8, 64).unwrap();
        assert_eq!(cams.len(), 8);
        for c in &cams {
            let p = c.rotation() * Vector3::new(0.0, 0.5, 0.0) + c.translation();
            assert!(p.z > 0.0);
            assert!((c.fx * p.x / p.z + c.cx - 32.0).abs() < 1e-9);
        }
    }
}
