//! Exo-to-ego video generation as continuous sequence modeling.
//!
//! An episode pairs a static exocentric clip with an egocentric clip of the
//! same scene. Instead of mapping one to the other directly, the two are joined
//! by a rendered transition segment and an interpolated camera path, and a
//! diffusion-forcing denoiser learns the whole stream with per-frame noise
//! levels.

// Validation uses `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod clip;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod geometry;
pub mod io;
pub mod media;
pub mod metrics;
pub mod model;
pub mod sequence;
pub mod train;
pub mod world;

pub use clip::FrameClip;
pub use error::{Error, Result};
