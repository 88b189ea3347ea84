//! The request-to-image path shared by `avatar render` and `POST /render`.

use std::io::Cursor;

use avatar_core::image::FloatImage;
use avatar_core::pipeline::Avatar;
use avatar_core::skeleton::PoseVector;
use avatar_core::splat::{matrix_from_row_major, Camera, CameraSpec, RenderOptions, SplatScene};
use avatar_core::{Error, Result};
use image::codecs::png::PngEncoder;
use image::{ExtendedColorType, ImageEncoder};
use serde::{Deserialize, Serialize};

/// Largest accepted image, in pixels.
pub const MAX_PIXELS: usize = 4096 * 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderRequest {
    pub pose: Vec<f64>,
    /// Row-major 4x4; identity when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub root_transform: Option<Vec<f64>>,
    /// Zeros when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expression_latent: Option<Vec<f64>>,
    pub camera: CameraSpec,
    #[serde(default)]
    pub background: [f64; 3],
}

fn posed(avatar: &Avatar, req: &RenderRequest) -> Result<(SplatScene, Camera)> {
    let root_transform = match &req.root_transform {
        Some(m) => matrix_from_row_major(m, "root_transform length")?,
        None => nalgebra::Matrix4::identity(),
    };
    if root_transform.iter().any(|v| !v.is_finite()) || req.background.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite root transform or background".into()));
    }
    let latent = req
        .expression_latent
        .clone()
        .unwrap_or_else(|| vec![0.0; avatar.conditioner.config.latent_dim]);
    let pose = PoseVector {
        theta: req.pose.clone(),
        root_transform,
    };
    let signal = avatar.driving_signal(pose, latent)?;
    let camera = Camera::try_from(req.camera.clone())?;
    if camera.width * camera.height > MAX_PIXELS {
        return Err(Error::InvalidArgument(format!(
            "image {}x{} exceeds {MAX_PIXELS} pixels",
            camera.width, camera.height
        )));
    }
    Ok((avatar.posed_scene(&signal)?, camera))
}

/// Posed Gaussians for a request, e.g. for PLY export.
pub fn posed_scene(avatar: &Avatar, req: &RenderRequest) -> Result<SplatScene> {
    Ok(posed(avatar, req)?.0)
}

pub fn render_request(avatar: &Avatar, req: &RenderRequest) -> Result<FloatImage> {
    let (scene, camera) = posed(avatar, req)?;
    let target = avatar_core::splat::render_tiled(&scene, &camera, req.background, &RenderOptions::default());
    Ok(target.color)
}

/// 8-bit sRGB PNG of a linear RGB image.
pub fn encode_png(img: &FloatImage) -> Vec<u8> {
    let mut out = Cursor::new(Vec::new());
    PngEncoder::new(&mut out)
        .write_image(
            &img.to_srgb8(),
            img.width as u32,
            img.height as u32,
            ExtendedColorType::Rgb8,
        )
        .expect("in-memory PNG encoding");
    out.into_inner()
}
