//! Training objectives: the cosine+MSE distance, input-consistency and
//! augmentation-based self-consistency regularizers, and their weighted sum.

use rand::{Rng, SeedableRng};

use crate::error::{Error, Result};
use crate::feature_io::resize::{area_downsample_adjoint, area_downsample_tensor};
use crate::feature_io::{FeatureMap, GuidanceImage};
use crate::tensor::Tensor;

/// Norms below this (squared) are treated as zero vectors: their cosine
/// distance is defined as 1 and they receive no cosine gradient.
const ZERO_NORM_EPS: f64 = 1e-24;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub main: f64,
    pub input: f64,
    pub self_consistency: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            main: 1.0,
            input: 0.1,
            self_consistency: 0.1,
        }
    }
}

impl LossWeights {
    pub fn new(main: f64, input: f64, self_consistency: f64) -> Result<Self> {
        let w = LossWeights {
            main,
            input,
            self_consistency,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.main < 0.0 || self.input < 0.0 || self.self_consistency < 0.0 {
            return Err(Error::invalid("loss weights must be non-negative"));
        }
        if self.main == 0.0 && self.input == 0.0 && self.self_consistency == 0.0 {
            return Err(Error::invalid("at least one loss weight must be positive"));
        }
        Ok(())
    }
}

/// Per-term scalars reported by a training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub main: f64,
    pub input: f64,
    pub self_consistency: f64,
    pub total: f64,
}

/// Mean over locations of (1 - cosine) between channel vectors, plus the
/// mean squared error over all elements. Zero iff the maps agree (for
/// nonzero vectors); zero-norm locations contribute cosine distance 1.
pub fn cos_mse(a: &FeatureMap, b: &FeatureMap) -> Result<f64> {
    check_same_shape(a, b)?;
    Ok(cos_mse_tensor(&a.to_tensor(), &b.to_tensor()))
}

fn check_same_shape(a: &FeatureMap, b: &FeatureMap) -> Result<()> {
    if (a.height(), a.width(), a.channels()) != (b.height(), b.width(), b.channels()) {
        return Err(Error::shape(format!(
            "shape mismatch {}x{}x{} vs {}x{}x{}",
            a.height(),
            a.width(),
            a.channels(),
            b.height(),
            b.width(),
            b.channels()
        )));
    }
    Ok(())
}

pub(crate) fn cos_mse_tensor(a: &Tensor, b: &Tensor) -> f64 {
    debug_assert!(a.h == b.h && a.w == b.w && a.c == b.c);
    let locations = (a.h * a.w) as f64;
    let elements = a.data.len() as f64;
    let mut cos_term = 0.0;
    let mut mse = 0.0;
    for loc in 0..a.h * a.w {
        let av = &a.data[loc * a.c..(loc + 1) * a.c];
        let bv = &b.data[loc * a.c..(loc + 1) * a.c];
        let mut dot = 0.0;
        let mut na = 0.0;
        let mut nb = 0.0;
        for (&x, &y) in av.iter().zip(bv) {
            dot += x * y;
            na += x * x;
            nb += y * y;
            mse += (x - y) * (x - y);
        }
        if na < ZERO_NORM_EPS || nb < ZERO_NORM_EPS {
            cos_term += 1.0;
        } else {
            // sqrt of the product keeps cos(x, x) == 1 exact
            cos_term += 1.0 - dot / (na * nb).sqrt();
        }
    }
    cos_term / locations + mse / elements
}

/// Loss value plus gradients with respect to both arguments.
pub(crate) fn cos_mse_grad(a: &Tensor, b: &Tensor) -> (f64, Tensor, Tensor) {
    let locations = (a.h * a.w) as f64;
    let elements = a.data.len() as f64;
    let mut grad_a = Tensor::zeros(a.h, a.w, a.c);
    let mut grad_b = Tensor::zeros(a.h, a.w, a.c);
    let mut cos_term = 0.0;
    let mut mse = 0.0;
    for loc in 0..a.h * a.w {
        let range = loc * a.c..(loc + 1) * a.c;
        let av = &a.data[range.clone()];
        let bv = &b.data[range.clone()];
        let mut dot = 0.0;
        let mut na2 = 0.0;
        let mut nb2 = 0.0;
        for (&x, &y) in av.iter().zip(bv) {
            dot += x * y;
            na2 += x * x;
            nb2 += y * y;
            mse += (x - y) * (x - y);
        }
        let ga = &mut grad_a.data[range.clone()];
        for ((g, &x), &y) in ga.iter_mut().zip(av).zip(bv) {
            *g = 2.0 * (x - y) / elements;
        }
        let gb = &mut grad_b.data[range.clone()];
        for ((g, &x), &y) in gb.iter_mut().zip(av).zip(bv) {
            *g = 2.0 * (y - x) / elements;
        }
        if na2 < ZERO_NORM_EPS || nb2 < ZERO_NORM_EPS {
            cos_term += 1.0;
            continue;
        }
        let denom = (na2 * nb2).sqrt();
        let cosine = dot / denom;
        cos_term += 1.0 - cosine;
        let ga = &mut grad_a.data[range.clone()];
        for ((g, &x), &y) in ga.iter_mut().zip(av).zip(bv) {
            *g += -(y / denom - cosine * x / na2) / locations;
        }
        let gb = &mut grad_b.data[range];
        for ((g, &x), &y) in gb.iter_mut().zip(av).zip(bv) {
            *g += -(x / denom - cosine * y / nb2) / locations;
        }
    }
    (cos_term / locations + mse / elements, grad_a, grad_b)
}

/// Distance between the prediction pooled back to the feature grid and the
/// original features. Pooling is exact area averaging, so block replication
/// of `features` scores exactly zero.
pub fn input_consistency(pred: &FeatureMap, features: &FeatureMap) -> Result<f64> {
    if pred.channels() != features.channels() {
        return Err(Error::shape(format!(
            "channel mismatch: prediction {} vs features {}",
            pred.channels(),
            features.channels()
        )));
    }
    if pred.height() < features.height() || pred.width() < features.width() {
        return Err(Error::shape(
            "prediction grid must be at least as large as the feature grid",
        ));
    }
    let pooled = area_downsample_tensor(&pred.to_tensor(), features.height(), features.width());
    Ok(cos_mse_tensor(&pooled, &features.to_tensor()))
}

/// Value plus gradient with respect to the prediction.
pub(crate) fn input_consistency_grad(pred: &Tensor, features: &Tensor) -> (f64, Tensor) {
    let pooled = area_downsample_tensor(pred, features.h, features.w);
    let (value, grad_pooled, _) = cos_mse_grad(&pooled, features);
    let grad_pred = area_downsample_adjoint(&grad_pooled, pred.h, pred.w);
    (value, grad_pred)
}

/// Random photometric perturbations for the self-consistency term.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AugmentConfig {
    pub brightness_prob: f64,
    pub brightness_range: (f64, f64),
    pub contrast_prob: f64,
    pub contrast_range: (f64, f64),
    pub blur_prob: f64,
    pub blur_sigma_max: f64,
    pub noise_prob: f64,
    pub noise_sigma_max: f64,
    pub grayscale_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            brightness_prob: 0.5,
            brightness_range: (0.7, 1.3),
            contrast_prob: 0.5,
            contrast_range: (0.7, 1.3),
            blur_prob: 0.5,
            blur_sigma_max: 1.5,
            noise_prob: 0.5,
            noise_sigma_max: 0.08,
            grayscale_prob: 0.1,
        }
    }
}

impl AugmentConfig {
    /// All probabilities zero: the augmentation becomes the identity.
    pub fn identity() -> Self {
        AugmentConfig {
            brightness_prob: 0.0,
            contrast_prob: 0.0,
            blur_prob: 0.0,
            noise_prob: 0.0,
            grayscale_prob: 0.0,
            ..AugmentConfig::default()
        }
    }
}

/// Randomly composed subset of brightness, contrast, blur, additive Gaussian
/// noise and grayscale conversion. Deterministic given the seed; output is
/// clamped back to [0, 1].
pub fn apply_augmentation(image: &GuidanceImage, seed: u64) -> GuidanceImage {
    apply_augmentation_with(image, &AugmentConfig::default(), seed)
}

pub fn apply_augmentation_with(
    image: &GuidanceImage,
    config: &AugmentConfig,
    seed: u64,
) -> GuidanceImage {
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    let (h, w) = (image.height(), image.width());
    let mut data: Vec<f64> = image.data().iter().map(|&v| v as f64).collect();

    if rng.gen::<f64>() < config.brightness_prob {
        let s = rng.gen_range(config.brightness_range.0..=config.brightness_range.1);
        for v in data.iter_mut() {
            *v *= s;
        }
    }
    if rng.gen::<f64>() < config.contrast_prob {
        let s = rng.gen_range(config.contrast_range.0..=config.contrast_range.1);
        let mean = data.iter().sum::<f64>() / data.len() as f64;
        for v in data.iter_mut() {
            *v = (*v - mean) * s + mean;
        }
    }
    if rng.gen::<f64>() < config.blur_prob {
        let sigma = rng.gen_range(0.0..=config.blur_sigma_max);
        if sigma > 1e-3 {
            data = gaussian_blur(&data, h, w, sigma);
        }
    }
    if rng.gen::<f64>() < config.noise_prob {
        let sigma = rng.gen_range(0.0..=config.noise_sigma_max);
        for v in data.iter_mut() {
            *v += sigma * standard_normal(&mut rng);
        }
    }
    if rng.gen::<f64>() < config.grayscale_prob {
        for px in data.chunks_mut(3) {
            let luma = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
            px.fill(luma);
        }
    }

    let clamped = data.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect();
    GuidanceImage::new(h, w, clamped).expect("clamped values are valid")
}

fn standard_normal(rng: &mut impl Rng) -> f64 {
    // Box-Muller on (0, 1] uniforms
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Separable edge-clamped Gaussian blur, radius 3 sigma.
fn gaussian_blur(data: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
    for i in -radius..=radius {
        kernel.push((-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    for k in kernel.iter_mut() {
        *k /= norm;
    }

    let mut tmp = vec![0.0f64; data.len()];
    for y in 0..h as isize {
        for x in 0..w as isize {
            for ch in 0..3 {
                let mut acc = 0.0;
                for (ki, k) in kernel.iter().enumerate() {
                    let sx = (x + ki as isize - radius).clamp(0, w as isize - 1);
                    acc += k * data[((y * w as isize + sx) * 3 + ch) as usize];
                }
                tmp[((y * w as isize + x) * 3 + ch) as usize] = acc;
            }
        }
    }
    let mut out = vec![0.0f64; data.len()];
    for y in 0..h as isize {
        for x in 0..w as isize {
            for ch in 0..3 {
                let mut acc = 0.0;
                for (ki, k) in kernel.iter().enumerate() {
                    let sy = (y + ki as isize - radius).clamp(0, h as isize - 1);
                    acc += k * tmp[((sy * w as isize + x) * 3 + ch) as usize];
                }
                out[((y * w as isize + x) * 3 + ch) as usize] = acc;
            }
        }
    }
    out
}

/// Distance between upsampled features under clean and augmented guidance.
/// Needs no ground-truth features.
pub fn self_consistency<F>(
    forward: F,
    features: &FeatureMap,
    image: &GuidanceImage,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&FeatureMap, &GuidanceImage) -> Result<FeatureMap>,
{
    self_consistency_with(forward, features, image, &AugmentConfig::default(), seed)
}

pub fn self_consistency_with<F>(
    forward: F,
    features: &FeatureMap,
    image: &GuidanceImage,
    config: &AugmentConfig,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&FeatureMap, &GuidanceImage) -> Result<FeatureMap>,
{
    let clean = forward(features, image)?;
    let augmented_image = apply_augmentation_with(image, config, seed);
    let augmented = forward(features, &augmented_image)?;
    cos_mse(&clean, &augmented)
}

/// Weighted sum of the three loss terms.
pub fn total_loss(main: f64, input: f64, self_consistency: f64, weights: &LossWeights) -> Result<f64> {
    weights.validate()?;
    Ok(weights.main * main + weights.input * input + weights.self_consistency * self_consistency)
}
