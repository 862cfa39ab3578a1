//! Synthetic desk-scale evaluation sets. Segmentation labels are the argmax
//! of a fixed random linear map of the encoder's own features, so a linear
//! probe has signal by construction. Depth labels combine a seeded ramp
//! with local brightness.

use rand::{Rng, SeedableRng};

use super::{ClassMap, DepthMap};
use crate::encoder::ToyEncoder;
use crate::error::Result;
use crate::feature_io::{FeatureMap, GuidanceImage};
use crate::rng::mix_seed;

#[derive(Debug, Clone)]
pub struct SegSample {
    pub image: GuidanceImage,
    /// Low-res features from the whole image (probe training input).
    pub features: FeatureMap,
    /// Labels on the feature grid.
    pub grid_labels: ClassMap,
    /// Labels at pixel resolution (nearest-upsampled grid labels).
    pub pixel_labels: ClassMap,
}

#[derive(Debug, Clone)]
pub struct DepthSample {
    pub image: GuidanceImage,
    pub features: FeatureMap,
    pub grid_depth: DepthMap,
    pub pixel_depth: DepthMap,
}

/// A segmentation set together with the linear map its labels derive from;
/// a probe built from that map scores a perfect accuracy by construction.
#[derive(Debug, Clone)]
pub struct SegmentationSet {
    pub samples: Vec<SegSample>,
    pub num_classes: usize,
    /// [feature_dim x num_classes], row-major over channels.
    pub class_matrix: Vec<f64>,
}

/// Builds segmentation samples whose labels derive linearly from the dense
/// oracle features through one shared seeded class matrix.
pub fn make_segmentation_set(
    encoder: &ToyEncoder,
    images: &[GuidanceImage],
    num_classes: usize,
    seed: u64,
) -> Result<SegmentationSet> {
    let c = encoder.config().feature_dim;
    let mut rng = rand::rngs::StdRng::seed_from_u64(mix_seed(seed, 0xC1A55));
    let class_matrix: Vec<f64> = (0..c * num_classes).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let mut samples = Vec::with_capacity(images.len());
    for image in images {
        let features = encoder.encode(image)?;
        let (gh, gw) = (features.height(), features.width());
        let mut labels = Vec::with_capacity(gh * gw);
        for y in 0..gh {
            for x in 0..gw {
                let f = features.pixel(y, x);
                let mut best = 0usize;
                let mut best_score = f64::NEG_INFINITY;
                for k in 0..num_classes {
                    let score: f64 = f
                        .iter()
                        .enumerate()
                        .map(|(ci, &v)| v as f64 * class_matrix[ci * num_classes + k])
                        .sum();
                    if score > best_score {
                        best_score = score;
                        best = k;
                    }
                }
                labels.push(best as u32);
            }
        }
        let grid_labels = ClassMap::new(gh, gw, labels)?;
        let pixel_labels = grid_labels.resize_nearest(image.height(), image.width());
        samples.push(SegSample {
            image: image.clone(),
            features,
            grid_labels,
            pixel_labels,
        });
    }
    Ok(SegmentationSet {
        samples,
        num_classes,
        class_matrix,
    })
}

/// Builds depth samples: a seeded linear ramp per image plus a local
/// brightness term, evaluated per feature cell and replicated to pixels.
pub fn make_depth_set(
    encoder: &ToyEncoder,
    images: &[GuidanceImage],
    seed: u64,
) -> Result<Vec<DepthSample>> {
    let patch = encoder.config().patch_size;
    let mut samples = Vec::with_capacity(images.len());
    for (idx, image) in images.iter().enumerate() {
        let features = encoder.encode(image)?;
        let (gh, gw) = (features.height(), features.width());
        let mut rng = rand::rngs::StdRng::seed_from_u64(mix_seed(seed, 0xD4A + idx as u64));
        let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let (dy, dx) = angle.sin_cos();
        let mut depth = Vec::with_capacity(gh * gw);
        for y in 0..gh {
            for x in 0..gw {
                let yn = (y as f64 + 0.5) / gh as f64;
                let xn = (x as f64 + 0.5) / gw as f64;
                let ramp = 0.5 * (yn * dy + xn * dx + 1.0);
                let mut luma = 0.0f64;
                for py in 0..patch {
                    for px in 0..patch {
                        let pix = image.pixel(y * patch + py, x * patch + px);
                        luma += (pix[0] as f64 + pix[1] as f64 + pix[2] as f64) / 3.0;
                    }
                }
                luma /= (patch * patch) as f64;
                depth.push((0.6 + 0.8 * ramp + 0.6 * luma) as f32);
            }
        }
        let grid_depth = DepthMap::new(gh, gw, depth)?;
        let pixel_depth = grid_depth.resize_nearest(image.height(), image.width());
        samples.push(DepthSample {
            image: image.clone(),
            features,
            grid_depth,
            pixel_depth,
        });
    }
    Ok(samples)
}
