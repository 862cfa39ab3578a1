//! featrise upsamples low-resolution feature maps to any target resolution,
//! guided by the RGB image they came from. The model is agnostic to the
//! feature source: one trained instance accepts maps with any channel count.
//!
//! The crate bundles the upsampler itself, its crop-based training pipeline,
//! a deterministic patch-local encoder that provides exact dense ground
//! truth at desk scale, linear-probe evaluation, and PCA visualization.

pub mod agnostic;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod feature_io;
pub mod losses;
pub mod synthetic;
pub mod train;
pub mod upsampler;

mod rng;
mod tensor;

pub use error::{Error, Result};
pub use feature_io::{FeatureMap, GuidanceImage};
