//! On-disk formats. Every float on disk is little-endian `f32`; JSON headers
//! carry a `format_version`.

mod blob;
mod config;
mod container;
mod files;
mod manifest;

pub use blob::{load_adam, load_conditioner, read_conditioner, save_adam, save_conditioner, write_conditioner};
pub use config::{parse_config, Config};
pub use container::{load_avatar, save_avatar, ChannelEntry, ContainerHeader, CHANNELS};
pub use files::{
    load_camera, load_latent, load_latent_sequence, load_mask, load_motion, load_pose, save_camera, save_latent,
    save_latent_sequence, save_mask, save_motion_jsonl, save_pose, PoseFile,
};
pub use manifest::{load_dataset, ManifestEntry};

use std::path::Path;

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

pub(crate) fn f32_bytes(values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 * values.len());
    for v in values {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub(crate) fn f32_values(bytes: &[u8], path: &Path) -> Result<Vec<f64>> {
    if !bytes.len().is_multiple_of(4) {
        return Err(Error::Format(format!(
            "{}: length is not a multiple of 4",
            path.display()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect())
}

pub(crate) fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn u32_at(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Format(format!("{}: truncated header", path.display())))
}
