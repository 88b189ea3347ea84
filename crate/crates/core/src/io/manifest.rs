//! Dataset manifest: a JSON array of sample records. Paths are relative to
//! the manifest's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{load_camera, load_latent, load_mask, load_pose, read_text};
use crate::error::{Error, Result};
use crate::fitting::{Dataset, Sample};
use crate::image::FloatImage;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub image_path: PathBuf,
    pub camera_path: PathBuf,
    pub pose_path: PathBuf,
    pub latent_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<PathBuf>,
    /// Defaults to the entry's position in the manifest.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub view: Option<usize>,
}

fn context(path: &Path, k: usize, e: Error) -> Error {
    Error::Format(format!("{} entry {k}: {e}", path.display()))
}

/// Loads and validates every sample: image and camera sizes agree, poses
/// have `pose_len` angles and latents have `latent_dim` entries.
pub fn load_dataset(path: &Path, pose_len: usize, latent_dim: usize) -> Result<Dataset> {
    let entries: Vec<ManifestEntry> = serde_json::from_str(&read_text(path)?).map_err(|e| Error::json(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut samples = Vec::with_capacity(entries.len());
    for (k, e) in entries.into_iter().enumerate() {
        let sample = (|| -> Result<Sample> {
            let image = FloatImage::load_raw(&base.join(&e.image_path))?;
            if image.channels != 3 {
                return Err(Error::mismatch("image channels", 3, image.channels));
            }
            let camera = load_camera(&base.join(&e.camera_path))?;
            if (camera.width, camera.height) != (image.width, image.height) {
                return Err(Error::InvalidArgument(format!(
                    "camera is {}x{} but the image is {}x{}",
                    camera.width, camera.height, image.width, image.height
                )));
            }
            let pose = load_pose(&base.join(&e.pose_path), pose_len)?;
            let latent = load_latent(&base.join(&e.latent_path))?;
            if latent.len() != latent_dim {
                return Err(Error::mismatch("expression latent length", latent_dim, latent.len()));
            }
            let mask = match &e.mask_path {
                Some(p) => {
                    let (m, w, h) = load_mask(&base.join(p))?;
                    if (w, h) != (image.width, image.height) {
                        return Err(Error::InvalidArgument(format!(
                            "mask is {w}x{h} but the image is {}x{}",
                            image.width, image.height
                        )));
                    }
                    Some(m)
                }
                None => None,
            };
            Ok(Sample {
                image,
                camera,
                pose,
                latent,
                mask,
                frame: e.frame.unwrap_or(k),
                view: e.view.unwrap_or(0),
            })
        })()
        .map_err(|err| context(path, k, err))?;
        samples.push(sample);
    }
    Ok(Dataset { samples })
}
