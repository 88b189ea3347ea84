//! UV-space Gaussian avatars: per-texel Gaussian maps, linear blend skinning,
//! tile-based splatting with an analytic backward pass, conditioning and
//! fitting.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod conditioning;
pub mod error;
pub mod fitting;
pub mod geometry;
pub mod image;
pub mod io;
pub mod mesh;
pub mod pipeline;
pub mod skeleton;
pub mod splat;
pub mod synth;
pub mod uvmap;

pub use error::{Error, Result};
