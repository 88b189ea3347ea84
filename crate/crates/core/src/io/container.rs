//! Avatar container: a directory with `header.json`, one float file per
//! channel, the validity mask as bytes, the skeleton and the conditioner.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{blob, f32_bytes, f32_values, read, read_text, write, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::mesh::MAX_INFLUENCES;
use crate::pipeline::Avatar;
use crate::skeleton::Skeleton;
use crate::uvmap::{GaussianMapSet, Influences};

/// Channel names and component counts, in file order.
pub const CHANNELS: [(&str, usize); 10] = [
    ("base_position", 3),
    ("base_rotation", 4),
    ("base_scale", 3),
    ("opacity_logit", 1),
    ("color", 3),
    ("skin_joints", MAX_INFLUENCES),
    ("skin_weights", MAX_INFLUENCES),
    ("delta_position", 3),
    ("delta_rotation", 4),
    ("delta_scale", 3),
];

const HEADER: &str = "header.json";
const VALID_MASK: &str = "valid_mask.u8";
const SKELETON: &str = "skeleton.json";
const CONDITIONER: &str = "conditioner.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelEntry {
    pub name: String,
    pub components: usize,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContainerHeader {
    pub format_version: u32,
    pub resolution: usize,
    pub channels: Vec<ChannelEntry>,
    pub valid_mask: String,
    pub skeleton: String,
    pub conditioner: String,
}

impl ContainerHeader {
    fn current(resolution: usize) -> Self {
        ContainerHeader {
            format_version: FORMAT_VERSION,
            resolution,
            channels: CHANNELS
                .iter()
                .map(|&(name, components)| ChannelEntry {
                    name: name.to_string(),
                    components,
                    file: format!("{name}.f32"),
                })
                .collect(),
            valid_mask: VALID_MASK.into(),
            skeleton: SKELETON.into(),
            conditioner: CONDITIONER.into(),
        }
    }
}

fn channel_data(maps: &GaussianMapSet, name: &str) -> Vec<f64> {
    match name {
        "base_position" => maps.base_position.clone(),
        "base_rotation" => maps.base_rotation.clone(),
        "base_scale" => maps.base_scale.clone(),
        "opacity_logit" => maps.opacity_logit.clone(),
        "color" => maps.color.clone(),
        "skin_joints" => maps.skin.iter().flat_map(|s| s.joints.map(|j| j as f64)).collect(),
        "skin_weights" => maps.skin.iter().flat_map(|s| s.weights).collect(),
        "delta_position" => maps.delta_position.clone(),
        "delta_rotation" => maps.delta_rotation.clone(),
        "delta_scale" => maps.delta_scale.clone(),
        _ => unreachable!("unknown channel {name}"),
    }
}

pub fn save_avatar(avatar: &Avatar, dir: &Path) -> Result<()> {
    let maps = &avatar.maps;
    let header = ContainerHeader::current(maps.width);
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for ch in &header.channels {
        write(&dir.join(&ch.file), &f32_bytes(&channel_data(maps, &ch.name)))?;
    }
    let mask: Vec<u8> = maps.valid.iter().map(|&v| v as u8).collect();
    write(&dir.join(&header.valid_mask), &mask)?;
    write(&dir.join(&header.skeleton), avatar.skeleton.to_json().as_bytes())?;
    blob::save_conditioner(&avatar.conditioner, &dir.join(&header.conditioner))?;
    let text = serde_json::to_string_pretty(&header).expect("header serialises");
    write(&dir.join(HEADER), text.as_bytes())
}

pub fn load_avatar(dir: &Path) -> Result<Avatar> {
    let header_path = dir.join(HEADER);
    let header: ContainerHeader =
        serde_json::from_str(&read_text(&header_path)?).map_err(|e| Error::json(&header_path, e))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported format_version {} (expected {FORMAT_VERSION})",
            header_path.display(),
            header.format_version
        )));
    }
    let r = header.resolution;
    if r == 0 {
        return Err(Error::Format(format!("{}: resolution is 0", header_path.display())));
    }
    let n = r * r;
    let mut maps = GaussianMapSet::empty(r, r);

    let mask_path = dir.join(&header.valid_mask);
    let mask = read(&mask_path)?;
    if mask.len() != n {
        return Err(Error::Format(format!(
            "{}: expected {n} bytes, found {}",
            mask_path.display(),
            mask.len()
        )));
    }
    for (v, &b) in maps.valid.iter_mut().zip(&mask) {
        *v = match b {
            0 => false,
            1 => true,
            _ => {
                return Err(Error::Format(format!(
                    "{}: mask byte {b} is not 0 or 1",
                    mask_path.display()
                )))
            }
        };
    }

    let mut seen = Vec::new();
    let mut skin_joints = Vec::new();
    let mut skin_weights = Vec::new();
    for ch in &header.channels {
        let expected = CHANNELS
            .iter()
            .find(|c| c.0 == ch.name)
            .ok_or_else(|| Error::Format(format!("{}: unknown channel {}", header_path.display(), ch.name)))?;
        if expected.1 != ch.components {
            return Err(Error::Format(format!(
                "{}: channel {} has {} components, expected {}",
                header_path.display(),
                ch.name,
                ch.components,
                expected.1
            )));
        }
        let path = dir.join(&ch.file);
        let values = f32_values(&read(&path)?, &path)?;
        if values.len() != n * ch.components {
            return Err(Error::Format(format!(
                "{}: expected {} floats, found {}",
                path.display(),
                n * ch.components,
                values.len()
            )));
        }
        match ch.name.as_str() {
            "base_position" => maps.base_position = values,
            "base_rotation" => maps.base_rotation = values,
            "base_scale" => maps.base_scale = values,
            "opacity_logit" => maps.opacity_logit = values,
            "color" => maps.color = values,
            "skin_joints" => skin_joints = values,
            "skin_weights" => skin_weights = values,
            "delta_position" => maps.delta_position = values,
            "delta_rotation" => maps.delta_rotation = values,
            "delta_scale" => maps.delta_scale = values,
            _ => unreachable!(),
        }
        seen.push(ch.name.clone());
    }
    if let Some(missing) = CHANNELS.iter().find(|c| !seen.iter().any(|s| s == c.0)) {
        return Err(Error::Format(format!(
            "{}: channel {} missing from the manifest",
            header_path.display(),
            missing.0
        )));
    }
    for i in 0..n {
        let mut inf = Influences::default();
        for k in 0..MAX_INFLUENCES {
            let j = skin_joints[i * MAX_INFLUENCES + k];
            if j < 0.0 || j.fract() != 0.0 || j > u32::MAX as f64 {
                return Err(Error::Format(format!(
                    "texel {i}: joint index {j} is not a valid index"
                )));
            }
            inf.joints[k] = j as u32;
            inf.weights[k] = skin_weights[i * MAX_INFLUENCES + k];
        }
        maps.skin[i] = inf;
    }

    let skeleton = Skeleton::load(&dir.join(&header.skeleton))?;
    let conditioner = blob::load_conditioner(&dir.join(&header.conditioner))?;
    Avatar::new(maps, skeleton, conditioner)
}
