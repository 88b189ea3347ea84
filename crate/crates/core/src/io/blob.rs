//! Single-file blobs: `u32` header length, JSON header, `f32` payload.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{f32_bytes, f32_values, read, u32_at, write, FORMAT_VERSION};
use crate::conditioning::{ConditionerConfig, LinearConditioner, TileProjector};
use crate::error::{Error, Result};
use crate::fitting::{Adam, AdamConfig};

const ACTIVATION: &str = "sigmoid";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConditionerHeader {
    format_version: u32,
    resolution: usize,
    joint_count: usize,
    config: ConditionerConfig,
    /// Activation applied to the color channels.
    activation: String,
    tensors: Vec<(String, usize)>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdamHeader {
    format_version: u32,
    step: u64,
    skipped: u64,
    config: AdamConfig,
    shapes: Vec<usize>,
}

fn encode<H: Serialize>(header: &H, tensors: &[&[f64]]) -> Vec<u8> {
    let json = serde_json::to_vec(header).expect("header serialises");
    let mut out = Vec::new();
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for t in tensors {
        out.extend_from_slice(&f32_bytes(t));
    }
    out
}

fn decode<H: DeserializeOwned>(bytes: &[u8], path: &Path) -> Result<(H, Vec<f64>)> {
    let len = u32_at(bytes, 0, path)? as usize;
    let json = bytes
        .get(4..4 + len)
        .ok_or_else(|| Error::Format(format!("{}: truncated header", path.display())))?;
    let header = serde_json::from_slice(json).map_err(|e| Error::json(path, e))?;
    let payload = f32_values(&bytes[4 + len..], path)?;
    Ok((header, payload))
}

fn split(payload: Vec<f64>, lengths: &[usize], path: &Path) -> Result<Vec<Vec<f64>>> {
    let total: usize = lengths.iter().sum();
    if payload.len() != total {
        return Err(Error::Format(format!(
            "{}: expected {total} payload floats, found {}",
            path.display(),
            payload.len()
        )));
    }
    let mut out = Vec::with_capacity(lengths.len());
    let mut at = 0;
    for &n in lengths {
        out.push(payload[at..at + n].to_vec());
        at += n;
    }
    Ok(out)
}

fn check_version(v: u32, path: &Path) -> Result<()> {
    if v != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported format_version {v} (expected {FORMAT_VERSION})",
            path.display()
        )));
    }
    Ok(())
}

pub fn write_conditioner(c: &LinearConditioner) -> Vec<u8> {
    let tensors: [(&str, &[f64]); 5] = [
        ("theta_reduction", &c.theta_reduction),
        ("projector_weight", &c.projector.weight),
        ("projector_bias", &c.projector.bias),
        ("weight", &c.weight),
        ("bias", &c.bias),
    ];
    let header = ConditionerHeader {
        format_version: FORMAT_VERSION,
        resolution: c.resolution,
        joint_count: c.joint_count,
        config: c.config.clone(),
        activation: ACTIVATION.into(),
        tensors: tensors.iter().map(|(n, t)| (n.to_string(), t.len())).collect(),
    };
    let data: Vec<&[f64]> = tensors.iter().map(|t| t.1).collect();
    encode(&header, &data)
}

pub fn read_conditioner(bytes: &[u8], path: &Path) -> Result<LinearConditioner> {
    let (h, payload): (ConditionerHeader, _) = decode(bytes, path)?;
    check_version(h.format_version, path)?;
    if h.activation != ACTIVATION {
        return Err(Error::Format(format!(
            "{}: unsupported activation {}",
            path.display(),
            h.activation
        )));
    }
    // A fresh conditioner fixes the expected tensor shapes.
    let template = LinearConditioner::new(h.config.clone(), h.resolution, h.joint_count)?;
    let expected = [
        ("theta_reduction", template.theta_reduction.len()),
        ("projector_weight", template.projector.weight.len()),
        ("projector_bias", template.projector.bias.len()),
        ("weight", template.weight.len()),
        ("bias", template.bias.len()),
    ];
    if h.tensors.len() != expected.len() || h.tensors.iter().zip(&expected).any(|(a, b)| a.0 != b.0 || a.1 != b.1) {
        return Err(Error::Format(format!(
            "{}: tensor list {:?} does not match the configuration",
            path.display(),
            h.tensors
        )));
    }
    let lengths: Vec<usize> = expected.iter().map(|e| e.1).collect();
    let mut parts = split(payload, &lengths, path)?.into_iter();
    let mut next = || parts.next().unwrap();
    Ok(LinearConditioner {
        theta_reduction: next(),
        projector: TileProjector {
            latent_dim: h.config.latent_dim,
            weight: next(),
            bias: next(),
        },
        weight: next(),
        bias: next(),
        config: h.config,
        resolution: h.resolution,
        joint_count: h.joint_count,
    })
}

pub fn save_conditioner(c: &LinearConditioner, path: &Path) -> Result<()> {
    write(path, &write_conditioner(c))
}

pub fn load_conditioner(path: &Path) -> Result<LinearConditioner> {
    read_conditioner(&read(path)?, path)
}

pub fn save_adam(adam: &Adam, path: &Path) -> Result<()> {
    let header = AdamHeader {
        format_version: FORMAT_VERSION,
        step: adam.step,
        skipped: adam.skipped,
        config: adam.config,
        shapes: adam.m.iter().map(Vec::len).collect(),
    };
    let data: Vec<&[f64]> = adam.m.iter().chain(&adam.v).map(Vec::as_slice).collect();
    write(path, &encode(&header, &data))
}

pub fn load_adam(path: &Path) -> Result<Adam> {
    let (h, payload): (AdamHeader, _) = decode(&read(path)?, path)?;
    check_version(h.format_version, path)?;
    let lengths: Vec<usize> = h.shapes.iter().chain(&h.shapes).copied().collect();
    let mut parts = split(payload, &lengths, path)?;
    let v = parts.split_off(h.shapes.len());
    Ok(Adam {
        config: h.config,
        step: h.step,
        m: parts,
        v,
        skipped: h.skipped,
    })
}
