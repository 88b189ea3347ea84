//! Per-sample inputs: latents, poses, motions, cameras and masks.
//!
//! Poses and motions are JSON when the file extension is `.json` / `.jsonl`
//! and packed `f32` otherwise.

use std::path::Path;

use nalgebra::Matrix4;
use serde::{Deserialize, Serialize};

use super::{f32_bytes, f32_values, read, read_text, u32_at, write};
use crate::error::{Error, Result};
use crate::image::FloatImage;
use crate::skeleton::PoseVector;
use crate::splat::{matrix_from_row_major, row_major, Camera, CameraSpec};

fn has_ext(path: &Path, ext: &str) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case(ext))
}

pub fn save_latent(latent: &[f64], path: &Path) -> Result<()> {
    let mut out = (latent.len() as u32).to_le_bytes().to_vec();
    out.extend_from_slice(&f32_bytes(latent));
    write(path, &out)
}

pub fn load_latent(path: &Path) -> Result<Vec<f64>> {
    let bytes = read(path)?;
    let d = u32_at(&bytes, 0, path)? as usize;
    let values = f32_values(&bytes[4..], path)?;
    if values.len() != d {
        return Err(Error::Format(format!(
            "{}: header says {d} floats, found {}",
            path.display(),
            values.len()
        )));
    }
    Ok(values)
}

pub fn save_latent_sequence(frames: &[Vec<f64>], path: &Path) -> Result<()> {
    let d = frames.first().map_or(0, Vec::len);
    if let Some(bad) = frames.iter().find(|f| f.len() != d) {
        return Err(Error::mismatch("latent sequence frame length", d, bad.len()));
    }
    let mut out = (frames.len() as u32).to_le_bytes().to_vec();
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for f in frames {
        out.extend_from_slice(&f32_bytes(f));
    }
    write(path, &out)
}

pub fn load_latent_sequence(path: &Path) -> Result<Vec<Vec<f64>>> {
    let bytes = read(path)?;
    let frames = u32_at(&bytes, 0, path)? as usize;
    let d = u32_at(&bytes, 4, path)? as usize;
    let values = f32_values(&bytes[8..], path)?;
    if values.len() != frames * d {
        return Err(Error::Format(format!(
            "{}: header says {frames} x {d} floats, found {}",
            path.display(),
            values.len()
        )));
    }
    Ok(if d == 0 {
        vec![Vec::new(); frames]
    } else {
        values.chunks(d).map(<[f64]>::to_vec).collect()
    })
}

/// JSON pose: either a bare angle array or an object with an optional
/// row-major root transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PoseFile {
    Angles(Vec<f64>),
    Full {
        theta: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        root_transform: Option<Vec<f64>>,
    },
}

impl PoseFile {
    pub fn into_pose(self, pose_len: usize) -> Result<PoseVector> {
        let (theta, root) = match self {
            PoseFile::Angles(t) => (t, None),
            PoseFile::Full { theta, root_transform } => (theta, root_transform),
        };
        pose_from_parts(theta, root.as_deref(), pose_len)
    }

    pub fn from_pose(pose: &PoseVector) -> Self {
        PoseFile::Full {
            theta: pose.theta.clone(),
            root_transform: Some(row_major(&pose.root_transform)),
        }
    }
}

fn pose_from_parts(theta: Vec<f64>, root: Option<&[f64]>, pose_len: usize) -> Result<PoseVector> {
    if theta.len() != pose_len {
        return Err(Error::mismatch("pose length", pose_len, theta.len()));
    }
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("pose contains a non-finite angle".into()));
    }
    let root_transform = match root {
        Some(r) => matrix_from_row_major(r, "root_transform")?,
        None => Matrix4::identity(),
    };
    Ok(PoseVector { theta, root_transform })
}

fn pose_from_flat(values: &[f64], pose_len: usize, what: &str) -> Result<PoseVector> {
    if values.len() == pose_len {
        pose_from_parts(values.to_vec(), None, pose_len)
    } else if values.len() == pose_len + 16 {
        pose_from_parts(values[..pose_len].to_vec(), Some(&values[pose_len..]), pose_len)
    } else {
        Err(Error::mismatch(what, pose_len, values.len()))
    }
}

pub fn save_pose(pose: &PoseVector, path: &Path) -> Result<()> {
    if has_ext(path, "json") {
        let text = serde_json::to_string(&PoseFile::from_pose(pose)).expect("pose serialises");
        write(path, text.as_bytes())
    } else {
        let mut v = pose.theta.clone();
        v.extend(row_major(&pose.root_transform));
        write(path, &f32_bytes(&v))
    }
}

pub fn load_pose(path: &Path, pose_len: usize) -> Result<PoseVector> {
    if has_ext(path, "json") {
        let file: PoseFile = serde_json::from_str(&read_text(path)?).map_err(|e| Error::json(path, e))?;
        file.into_pose(pose_len)
    } else {
        pose_from_flat(&f32_values(&read(path)?, path)?, pose_len, "pose length")
    }
}

/// One pose per line as JSON.
pub fn save_motion_jsonl(poses: &[PoseVector], path: &Path) -> Result<()> {
    let mut text = String::new();
    for p in poses {
        text.push_str(&serde_json::to_string(&PoseFile::from_pose(p)).expect("pose serialises"));
        text.push('\n');
    }
    write(path, text.as_bytes())
}

/// JSON-lines for `.jsonl`; otherwise `u32` frame count, `u32` floats per
/// frame, then the frames.
pub fn load_motion(path: &Path, pose_len: usize) -> Result<Vec<PoseVector>> {
    if has_ext(path, "jsonl") {
        let text = read_text(path)?;
        let mut out = Vec::new();
        for (k, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let file: PoseFile = serde_json::from_str(line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: k + 1,
                message: e.to_string(),
            })?;
            out.push(file.into_pose(pose_len).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: k + 1,
                message: e.to_string(),
            })?);
        }
        Ok(out)
    } else {
        let bytes = read(path)?;
        let frames = u32_at(&bytes, 0, path)? as usize;
        let stride = u32_at(&bytes, 4, path)? as usize;
        let values = f32_values(&bytes[8..], path)?;
        if values.len() != frames * stride {
            return Err(Error::Format(format!(
                "{}: header says {frames} x {stride} floats, found {}",
                path.display(),
                values.len()
            )));
        }
        (0..frames)
            .map(|f| pose_from_flat(&values[f * stride..(f + 1) * stride], pose_len, "motion frame length"))
            .collect()
    }
}

pub fn save_camera(camera: &Camera, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(&camera.to_spec()).expect("camera serialises");
    write(path, text.as_bytes())
}

pub fn load_camera(path: &Path) -> Result<Camera> {
    let spec: CameraSpec = serde_json::from_str(&read_text(path)?).map_err(|e| Error::json(path, e))?;
    Camera::try_from(spec)
}

/// Masks are single-channel raw images; texels above 0.5 are foreground.
pub fn save_mask(mask: &[bool], width: usize, height: usize, path: &Path) -> Result<()> {
    if mask.len() != width * height {
        return Err(Error::mismatch("mask length", width * height, mask.len()));
    }
    let mut img = FloatImage::new(width, height, 1);
    for (d, &m) in img.data.iter_mut().zip(mask) {
        *d = if m { 1.0 } else { 0.0 };
    }
    img.save_raw(path)
}

pub fn load_mask(path: &Path) -> Result<(Vec<bool>, usize, usize)> {
    let img = FloatImage::load_raw(path)?;
    if img.channels != 1 {
        return Err(Error::mismatch("mask channels", 1, img.channels));
    }
    Ok((img.data.iter().map(|&v| v > 0.5).collect(), img.width, img.height))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn latent_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.bin");
        save_latent(&[0.5, -1.25, 3.0], &p).unwrap();
        assert_eq!(load_latent(&p).unwrap(), vec![0.5, -1.25, 3.0]);
        let s = dir.path().join("zs.bin");
        save_latent_sequence(&[vec![1.0, 2.0], vec![3.0, 4.0]], &s).unwrap();
        assert_eq!(load_latent_sequence(&s).unwrap(), vec![vec![1.0, 2.0], vec![3.0, 4.0]]);
    }

    #[test]
    fn pose_forms() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.json");
        std::fs::write(&p, "[0.5, 0.25, 0.0]").unwrap();
        let pose = load_pose(&p, 3).unwrap();
        assert_eq!(pose.theta, vec![0.5, 0.25, 0.0]);
        assert_eq!(pose.root_transform, Matrix4::identity());
        assert!(matches!(
            load_pose(&p, 6),
            Err(Error::DimensionMismatch {
                expected: 6,
                actual: 3,
                ..
            })
        ));

        let mut pose = pose;
        pose.root_transform[(0, 3)] = 2.0;
        let b = dir.path().join("b.bin");
        save_pose(&pose, &b).unwrap();
        assert_eq!(load_pose(&b, 3).unwrap(), pose);
        let j = dir.path().join("b.json");
        save_pose(&pose, &j).unwrap();
        assert_eq!(load_pose(&j, 3).unwrap(), pose);
    }

    #[test]
    fn motion_jsonl_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        std::fs::write(&p, "[0,0,0]\n[1,2]\n").unwrap();
        match load_motion(&p, 3) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn packed_motion() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.bin");
        let mut bytes = 2u32.to_le_bytes().to_vec();
        bytes.extend(3u32.to_le_bytes());
        bytes.extend(f32_bytes(&[0.0, 0.5, 1.0, 1.5, 2.0, 2.5]));
        std::fs::write(&p, bytes).unwrap();
        let m = load_motion(&p, 3).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m[1].theta, vec![1.5, 2.0, 2.5]);
    }
}
