//! Deterministic patch-local feature extractor.
//!
//! Each P x P pixel patch is mapped through a frozen, seeded two-layer
//! perceptron, so a feature cell depends on exactly its own patch. Applying
//! the same function at every stride-spaced window therefore yields exact
//! high-resolution ground-truth features: features of a crop equal the
//! corresponding slice of the dense grid, which is what the training
//! pipeline is validated against.

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_io::{read_feature_map, FeatureMap, GuidanceImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Pixels per patch side.
    pub patch_size: usize,
    /// Output channels per cell.
    pub feature_dim: usize,
    /// Width of the perceptron's hidden layer.
    pub hidden_dim: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            patch_size: 8,
            feature_dim: 32,
            hidden_dim: 64,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.feature_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::invalid("encoder dimensions must be positive"));
        }
        Ok(())
    }
}

/// Frozen encoder instance. Identical configs produce identical weights.
#[derive(Debug, Clone)]
pub struct ToyEncoder {
    config: EncoderConfig,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

impl ToyEncoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let input_dim = config.patch_size * config.patch_size * 3;
        let mut rng = rand::rngs::StdRng::seed_from_u64(config.seed);
        let bound1 = 1.0 / (input_dim as f64).sqrt();
        let bound2 = 1.0 / (config.hidden_dim as f64).sqrt();
        let w1 = (0..input_dim * config.hidden_dim)
            .map(|_| rng.gen_range(-bound1..bound1))
            .collect();
        let b1 = (0..config.hidden_dim).map(|_| rng.gen_range(-bound1..bound1)).collect();
        let w2 = (0..config.hidden_dim * config.feature_dim)
            .map(|_| rng.gen_range(-bound2..bound2))
            .collect();
        let b2 = (0..config.feature_dim).map(|_| rng.gen_range(-bound2..bound2)).collect();
        Ok(ToyEncoder {
            config,
            w1,
            b1,
            w2,
            b2,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Feature vector for one P x P window with top-left corner (top, left).
    fn encode_patch(&self, image: &GuidanceImage, top: usize, left: usize, out: &mut [f32]) {
        let p = self.config.patch_size;
        let hidden = self.config.hidden_dim;
        let mut x = Vec::with_capacity(p * p * 3);
        for py in 0..p {
            for px in 0..p {
                let pix = image.pixel(top + py, left + px);
                // centered inputs keep features decorrelated across patches
                x.extend(pix.iter().map(|&v| v as f64 - 0.5));
            }
        }
        let mut h = vec![0.0f64; hidden];
        for (j, hj) in h.iter_mut().enumerate() {
            let mut acc = self.b1[j];
            let col = &self.w1[j * x.len()..(j + 1) * x.len()];
            for (xv, wv) in x.iter().zip(col) {
                acc += xv * wv;
            }
            *hj = acc.tanh();
        }
        for (j, oj) in out.iter_mut().enumerate() {
            let mut acc = self.b2[j];
            let col = &self.w2[j * hidden..(j + 1) * hidden];
            for (hv, wv) in h.iter().zip(col) {
                acc += hv * wv;
            }
            *oj = acc.tanh() as f32;
        }
    }

    /// Non-overlapping patch encoding: output shape (H/P, W/P, c).
    pub fn encode(&self, image: &GuidanceImage) -> Result<FeatureMap> {
        let p = self.config.patch_size;
        if image.height() % p != 0 || image.width() % p != 0 {
            return Err(Error::shape(format!(
                "image {}x{} not divisible by patch size {p}",
                image.height(),
                image.width()
            )));
        }
        self.encode_dense(image, p)
    }

    /// Strided dense encoding over every stride-spaced window. At stride = P
    /// this equals [`ToyEncoder::encode`]; at stride = 1 it is the
    /// maximal-resolution ground-truth grid.
    pub fn encode_dense(&self, image: &GuidanceImage, stride: usize) -> Result<FeatureMap> {
        let p = self.config.patch_size;
        if stride == 0 {
            return Err(Error::shape("stride must be positive"));
        }
        if image.height() < p || image.width() < p {
            return Err(Error::shape(format!(
                "image {}x{} smaller than patch size {p}",
                image.height(),
                image.width()
            )));
        }
        if (image.height() - p) % stride != 0 || (image.width() - p) % stride != 0 {
            return Err(Error::shape(format!(
                "stride {stride} does not divide image extent minus patch ({}x{}, patch {p})",
                image.height(),
                image.width()
            )));
        }
        let grid_h = (image.height() - p) / stride + 1;
        let grid_w = (image.width() - p) / stride + 1;
        let c = self.config.feature_dim;
        let mut data = vec![0.0f32; grid_h * grid_w * c];
        for gy in 0..grid_h {
            for gx in 0..grid_w {
                let base = (gy * grid_w + gx) * c;
                self.encode_patch(image, gy * stride, gx * stride, &mut data[base..base + c]);
            }
        }
        FeatureMap::new(grid_h, grid_w, c, data)
    }
}

/// Reads externally produced features from an ANYT file. No assumption is
/// made on the channel count; downstream layers accept any.
pub fn import_external_features(path: impl AsRef<std::path::Path>) -> Result<FeatureMap> {
    read_feature_map(path)
}
