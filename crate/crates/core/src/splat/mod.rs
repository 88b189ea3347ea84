//! Gaussian splatting: EWA projection, front-to-back alpha blending, a
//! brute-force reference renderer, the tile-based renderer and its analytic
//! backward pass.

mod backward;
mod camera;
pub mod ply;
mod project;
mod raster;

pub use backward::{render_backward, render_backward_retained, SceneGradients};
pub use camera::{matrix_from_row_major, row_major, Camera, CameraSpec, DEFAULT_Z_NEAR};
pub use ply::{covariance_frame, load_ply, read_ply, save_ply, write_ply, SH_C0};
pub use project::{alpha_at, covariance3d, project_gaussian, sigmoid, Projection};
pub use raster::{render_brute, render_tiled, render_tiled_retained, BinStats, ForwardPass, RenderTarget};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

/// Low-pass dilation added to every screen-space covariance, in pixels².
pub const COVARIANCE_DILATION: f64 = 0.3;
/// Upper bound on a single splat's alpha.
pub const ALPHA_CAP: f64 = 0.99;
/// Contributions below this alpha are skipped.
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
/// Skip threshold used by [`RenderOptions::gradient_check`]. Small enough
/// that the jump where a contribution is dropped is far below
/// finite-difference resolution.
pub const GRADIENT_CHECK_ALPHA_MIN: f64 = 1e-12;
/// Default transmittance at which a pixel stops blending.
pub const EARLY_STOP_T: f64 = 1e-4;
pub const DEFAULT_TILE: usize = 16;

/// One posed Gaussian. `linear` is the posed rotation, which may be a
/// non-orthonormal skinning blend.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Splat {
    pub position: Vector3<f64>,
    pub linear: Matrix3<f64>,
    pub scale: Vector3<f64>,
    pub opacity_logit: f64,
    pub color: [f64; 3],
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SplatScene {
    pub splats: Vec<Splat>,
}

impl SplatScene {
    pub fn len(&self) -> usize {
        self.splats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.splats.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    /// Per-tile gradients are summed in tile order; bit-reproducible.
    #[default]
    Strict,
    /// Per-thread partial sums; reproducible only up to reassociation.
    Parallel,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderOptions {
    pub tile_size: usize,
    /// Stop blending a pixel once its transmittance would fall below this
    /// value. `None` blends every contribution (gradient-check mode).
    pub early_stop: Option<f64>,
    /// Contributions with a smaller alpha are skipped.
    pub alpha_min: f64,
    pub reduction: Reduction,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            tile_size: DEFAULT_TILE,
            early_stop: Some(EARLY_STOP_T),
            alpha_min: ALPHA_MIN,
            reduction: Reduction::Strict,
        }
    }
}

impl RenderOptions {
    pub fn gradient_check() -> Self {
        RenderOptions {
            early_stop: None,
            alpha_min: GRADIENT_CHECK_ALPHA_MIN,
            ..Default::default()
        }
    }
}
