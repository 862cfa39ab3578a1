//! Linear-probe evaluation and feature visualization: per-pixel probes for
//! segmentation and depth, their metrics, synthetic desk-scale datasets,
//! and PCA projection of feature maps to RGB.

mod pca;
mod probes;
mod synth_sets;

pub use pca::pca_rgb;
pub use probes::{
    fit_depth_probe, fit_segmentation_probe, ProbeHyperparams, ProbeTask, ProbeWeights,
};
pub use synth_sets::{make_depth_set, make_segmentation_set, DepthSample, SegSample, SegmentationSet};

use crate::encoder::ToyEncoder;
use crate::error::{Error, Result};
use crate::feature_io::{resize_nearest, FeatureMap, GuidanceImage};

pub const IGNORE_INDEX: u32 = 255;

/// Per-pixel class indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u32>,
}

impl ClassMap {
    pub fn new(height: usize, width: usize, data: Vec<u32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::invalid("class map length mismatch"));
        }
        Ok(ClassMap {
            height,
            width,
            data,
        })
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> u32 {
        self.data[y * self.width + x]
    }

    /// Nearest-neighbor resize under the shared coordinate convention.
    pub fn resize_nearest(&self, out_h: usize, out_w: usize) -> ClassMap {
        use crate::feature_io::resize::nearest_index;
        let mut data = Vec::with_capacity(out_h * out_w);
        for y in 0..out_h {
            let sy = nearest_index(y, self.height, out_h);
            for x in 0..out_w {
                let sx = nearest_index(x, self.width, out_w);
                data.push(self.at(sy, sx));
            }
        }
        ClassMap {
            height: out_h,
            width: out_w,
            data,
        }
    }
}

/// Per-pixel depth values; entries <= 0 are treated as invalid.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl DepthMap {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::invalid("depth map length mismatch"));
        }
        Ok(DepthMap {
            height,
            width,
            data,
        })
    }

    pub fn resize_nearest(&self, out_h: usize, out_w: usize) -> DepthMap {
        use crate::feature_io::resize::nearest_index;
        let mut data = Vec::with_capacity(out_h * out_w);
        for y in 0..out_h {
            let sy = nearest_index(y, self.height, out_h);
            for x in 0..out_w {
                let sx = nearest_index(x, self.width, out_w);
                data.push(self.data[sy * self.width + sx]);
            }
        }
        DepthMap {
            height: out_h,
            width: out_w,
            data,
        }
    }
}

/// Mean over classes present in the ground truth of intersection-over-union.
/// Ignored pixels are excluded from both intersection and union.
pub fn miou(
    pred: &ClassMap,
    gt: &ClassMap,
    num_classes: usize,
    ignore_index: u32,
) -> Result<f64> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(Error::shape("prediction and ground truth sizes differ"));
    }
    let mut intersection = vec![0u64; num_classes];
    let mut union = vec![0u64; num_classes];
    let mut present = vec![false; num_classes];
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        if g == ignore_index {
            continue;
        }
        let g = g as usize;
        let p = p as usize;
        if g >= num_classes || p >= num_classes {
            return Err(Error::invalid("class index out of range"));
        }
        present[g] = true;
        if p == g {
            intersection[g] += 1;
            union[g] += 1;
        } else {
            union[g] += 1;
            union[p] += 1;
        }
    }
    let mut total = 0.0;
    let mut count = 0.0;
    for k in 0..num_classes {
        if present[k] {
            total += intersection[k] as f64 / union[k] as f64;
            count += 1.0;
        }
    }
    if count == 0.0 {
        return Err(Error::invalid("no labeled pixels"));
    }
    Ok(total / count)
}

/// Fraction of non-ignored pixels predicted correctly.
pub fn pixel_accuracy(pred: &ClassMap, gt: &ClassMap, ignore_index: u32) -> Result<f64> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(Error::shape("prediction and ground truth sizes differ"));
    }
    let mut correct = 0u64;
    let mut total = 0u64;
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        if g == ignore_index {
            continue;
        }
        total += 1;
        if p == g {
            correct += 1;
        }
    }
    if total == 0 {
        return Err(Error::invalid("all pixels ignored, accuracy undefined"));
    }
    Ok(correct as f64 / total as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DepthMode {
    Absolute,
    /// Least-squares scale and shift alignment of the prediction to the
    /// ground truth before computing metrics.
    Relative,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthMetrics {
    pub rmse: f64,
    /// Fraction of pixels with max(pred/gt, gt/pred) < 1.25.
    pub delta1: f64,
    /// Set when the relative mode had to fall back to scale-only alignment
    /// because the prediction had no variance.
    pub scale_only_fallback: bool,
}

pub fn depth_metrics(pred: &DepthMap, gt: &DepthMap, mode: DepthMode) -> Result<DepthMetrics> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(Error::shape("prediction and ground truth sizes differ"));
    }
    let pairs: Vec<(f64, f64)> = pred
        .data
        .iter()
        .zip(&gt.data)
        .filter(|(_, &g)| g > 0.0)
        .map(|(&p, &g)| (p as f64, g as f64))
        .collect();
    if pairs.is_empty() {
        return Err(Error::invalid("no valid ground-truth depths"));
    }
    let n = pairs.len() as f64;

    let (aligned, fallback): (Vec<(f64, f64)>, bool) = match mode {
        DepthMode::Absolute => (pairs, false),
        DepthMode::Relative => {
            let sum_p: f64 = pairs.iter().map(|(p, _)| p).sum();
            let sum_g: f64 = pairs.iter().map(|(_, g)| g).sum();
            let sum_pp: f64 = pairs.iter().map(|(p, _)| p * p).sum();
            let sum_pg: f64 = pairs.iter().map(|(p, g)| p * g).sum();
            let det = n * sum_pp - sum_p * sum_p;
            if det.abs() < 1e-12 * n * n {
                // zero-variance prediction: scale-only alignment
                let scale = if sum_pp > 0.0 { sum_pg / sum_pp } else { 1.0 };
                (pairs.iter().map(|&(p, g)| (scale * p, g)).collect(), true)
            } else {
                let scale = (n * sum_pg - sum_p * sum_g) / det;
                let shift = (sum_g - scale * sum_p) / n;
                (
                    pairs.iter().map(|&(p, g)| (scale * p + shift, g)).collect(),
                    false,
                )
            }
        }
    };

    let mse: f64 = aligned.iter().map(|(p, g)| (p - g) * (p - g)).sum::<f64>() / n;
    let delta1 = aligned
        .iter()
        .filter(|(p, g)| {
            if *p <= 0.0 {
                return false;
            }
            (p / g).max(g / p) < 1.25
        })
        .count() as f64
        / n;
    Ok(DepthMetrics {
        rmse: mse.sqrt(),
        delta1,
        scale_only_fallback: fallback,
    })
}

/// Named metrics for one evaluation run, serializable as flat key=value
/// lines.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub task: String,
    pub metrics: Vec<(String, f64)>,
    pub notes: Vec<String>,
}

impl MetricReport {
    pub fn to_text(&self) -> String {
        let mut out = format!("task={}\n", self.task);
        for (k, v) in &self.metrics {
            out.push_str(&format!("{k}={v:.6}\n"));
        }
        for n in &self.notes {
            out.push_str(&format!("note={n}\n"));
        }
        out
    }

    pub fn write(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.metrics.iter().find(|(k, _)| k == key).map(|(_, v)| *v)
    }
}

/// Runs the probe over upsampled features for every sample and aggregates
/// segmentation metrics against pixel-level labels at the target
/// resolution. `forward` maps (low-res features, image) to upsampled
/// features at the evaluation resolution.
pub fn evaluate_segmentation<F>(
    forward: F,
    probe: &ProbeWeights,
    samples: &[SegSample],
    num_classes: usize,
) -> Result<MetricReport>
where
    F: Fn(&FeatureMap, &GuidanceImage) -> Result<FeatureMap>,
{
    if samples.is_empty() {
        return Err(Error::invalid("empty evaluation dataset"));
    }
    if probe.task != ProbeTask::Segmentation {
        return Err(Error::invalid("probe is not a segmentation head"));
    }
    let mut intersection = vec![0u64; num_classes];
    let mut union = vec![0u64; num_classes];
    let mut present = vec![false; num_classes];
    let mut correct = 0u64;
    let mut total = 0u64;
    for sample in samples {
        let features = forward(&sample.features, &sample.image)?;
        if features.channels() != probe.in_dim {
            return Err(Error::invalid("probe and feature channel mismatch"));
        }
        let pred = probe.predict_classes(&features)?;
        let labels = sample
            .pixel_labels
            .resize_nearest(features.height(), features.width());
        for (&p, &g) in pred.data.iter().zip(&labels.data) {
            if g == IGNORE_INDEX {
                continue;
            }
            let (p, g) = (p as usize, g as usize);
            present[g] = true;
            total += 1;
            if p == g {
                correct += 1;
                intersection[g] += 1;
                union[g] += 1;
            } else {
                union[g] += 1;
                union[p] += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::invalid("no labeled pixels in dataset"));
    }
    let mut iou_sum = 0.0;
    let mut iou_count = 0.0;
    for k in 0..num_classes {
        if present[k] {
            iou_sum += intersection[k] as f64 / union[k] as f64;
            iou_count += 1.0;
        }
    }
    Ok(MetricReport {
        task: "segmentation".into(),
        metrics: vec![
            ("miou".into(), iou_sum / iou_count),
            ("accuracy".into(), correct as f64 / total as f64),
        ],
        notes: vec![],
    })
}

/// Depth analog of [`evaluate_segmentation`]; metrics aggregate over all
/// valid pixels, with relative-mode alignment done per image.
pub fn evaluate_depth<F>(
    forward: F,
    probe: &ProbeWeights,
    samples: &[DepthSample],
    mode: DepthMode,
) -> Result<MetricReport>
where
    F: Fn(&FeatureMap, &GuidanceImage) -> Result<FeatureMap>,
{
    if samples.is_empty() {
        return Err(Error::invalid("empty evaluation dataset"));
    }
    if probe.task != ProbeTask::Depth {
        return Err(Error::invalid("probe is not a depth head"));
    }
    let mut sq_sum = 0.0;
    let mut delta_hits = 0.0;
    let mut count = 0.0;
    let mut fallbacks = 0usize;
    for sample in samples {
        let features = forward(&sample.features, &sample.image)?;
        let pred = probe.predict_depth(&features)?;
        let gt = sample
            .pixel_depth
            .resize_nearest(features.height(), features.width());
        let m = depth_metrics(&pred, &gt, mode)?;
        let n = gt.data.iter().filter(|&&g| g > 0.0).count() as f64;
        sq_sum += m.rmse * m.rmse * n;
        delta_hits += m.delta1 * n;
        count += n;
        if m.scale_only_fallback {
            fallbacks += 1;
        }
    }
    let mut notes = Vec::new();
    if fallbacks > 0 {
        notes.push(format!(
            "scale-only alignment fallback on {fallbacks} image(s)"
        ));
    }
    Ok(MetricReport {
        task: "depth".into(),
        metrics: vec![
            ("rmse".into(), (sq_sum / count).sqrt()),
            ("delta1".into(), delta_hits / count),
        ],
        notes,
    })
}

/// Upsampling baseline usable anywhere a model forward is expected.
pub fn nearest_forward(
    features: &FeatureMap,
    image: &GuidanceImage,
) -> Result<FeatureMap> {
    resize_nearest(features, image.height(), image.width())
}

/// Encoder wrapper producing grid features for evaluation samples.
pub fn encode_features(encoder: &ToyEncoder, image: &GuidanceImage) -> Result<FeatureMap> {
    encoder.encode(image)
}
