//! Per-pixel linear heads fit by full-batch adaptive gradient descent.

use rand::{Rng, SeedableRng};

use super::{ClassMap, DepthMap, IGNORE_INDEX};
use crate::error::{Error, Result};
use crate::feature_io::FeatureMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeTask {
    Segmentation,
    Depth,
}

/// A 1x1-convolution head: one matrix and bias applied at every pixel.
/// Depth heads pass the output through softplus to stay positive.
#[derive(Debug, Clone)]
pub struct ProbeWeights {
    pub task: ProbeTask,
    pub in_dim: usize,
    pub out_dim: usize,
    /// [in_dim x out_dim], row-major over input channels.
    pub matrix: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ProbeWeights {
    pub(crate) fn seeded(task: ProbeTask, in_dim: usize, out_dim: usize, seed: u64) -> Self {
        let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
        ProbeWeights {
            task,
            in_dim,
            out_dim,
            matrix: (0..in_dim * out_dim).map(|_| rng.gen_range(-0.01..0.01)).collect(),
            bias: vec![0.0; out_dim],
        }
    }

    pub(crate) fn logits_at(&self, feature: &[f32], out: &mut [f64]) {
        out.copy_from_slice(&self.bias);
        for (ci, &v) in feature.iter().enumerate() {
            let row = &self.matrix[ci * self.out_dim..(ci + 1) * self.out_dim];
            for (o, &w) in out.iter_mut().zip(row) {
                *o += v as f64 * w;
            }
        }
    }

    /// Argmax class prediction at every pixel.
    pub fn predict_classes(&self, features: &FeatureMap) -> Result<ClassMap> {
        if features.channels() != self.in_dim {
            return Err(Error::invalid(format!(
                "probe expects {} channels, features have {}",
                self.in_dim,
                features.channels()
            )));
        }
        let mut data = Vec::with_capacity(features.height() * features.width());
        let mut logits = vec![0.0f64; self.out_dim];
        for y in 0..features.height() {
            for x in 0..features.width() {
                self.logits_at(features.pixel(y, x), &mut logits);
                let mut best = 0usize;
                for (k, &l) in logits.iter().enumerate() {
                    if l > logits[best] {
                        best = k;
                    }
                }
                data.push(best as u32);
            }
        }
        ClassMap::new(features.height(), features.width(), data)
    }

    /// Positive depth prediction.
    pub fn predict_depth(&self, features: &FeatureMap) -> Result<DepthMap> {
        if features.channels() != self.in_dim {
            return Err(Error::invalid("probe and feature channel mismatch"));
        }
        if self.out_dim != 1 {
            return Err(Error::invalid("depth probe must have one output"));
        }
        let mut data = Vec::with_capacity(features.height() * features.width());
        let mut out = vec![0.0f64];
        for y in 0..features.height() {
            for x in 0..features.width() {
                self.logits_at(features.pixel(y, x), &mut out);
                data.push(softplus(out[0]) as f32);
            }
        }
        DepthMap::new(features.height(), features.width(), data)
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ProbeHyperparams {
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ProbeHyperparams {
    fn default() -> Self {
        ProbeHyperparams {
            steps: 500,
            learning_rate: 1e-2,
            seed: 0,
        }
    }
}

/// Plain Adam over one flat parameter vector.
struct FlatAdam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl FlatAdam {
    fn new(n: usize) -> Self {
        FlatAdam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn update(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.t += 1;
        let (b1, b2) = (0.9f64, 0.999f64);
        let bias1 = 1.0 - b1.powi(self.t);
        let bias2 = 1.0 - b2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * grads[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * grads[i] * grads[i];
            params[i] -= lr * (self.m[i] / bias1) / ((self.v[i] / bias2).sqrt() + 1e-8);
        }
    }
}

fn collect_pixels<'a>(
    features: &'a [FeatureMap],
    spatial: impl Fn(usize) -> (usize, usize),
) -> Result<usize> {
    if features.is_empty() {
        return Err(Error::invalid("empty probe training set"));
    }
    let c = features[0].channels();
    for (i, f) in features.iter().enumerate() {
        if f.channels() != c {
            return Err(Error::shape("inconsistent feature channel counts"));
        }
        let (h, w) = spatial(i);
        if f.height() != h || f.width() != w {
            return Err(Error::shape("feature/label spatial size mismatch"));
        }
    }
    Ok(c)
}

/// Cross-entropy fit of the segmentation head; ignore-index pixels are
/// skipped. Deterministic given the seed.
pub fn fit_segmentation_probe(
    features: &[FeatureMap],
    labels: &[ClassMap],
    num_classes: usize,
    hp: ProbeHyperparams,
) -> Result<ProbeWeights> {
    if features.len() != labels.len() {
        return Err(Error::invalid("feature/label count mismatch"));
    }
    let in_dim = collect_pixels(features, |i| (labels[i].height, labels[i].width))?;
    if num_classes < 2 {
        return Err(Error::invalid("need at least two classes"));
    }

    let mut xs: Vec<&[f32]> = Vec::new();
    let mut ys: Vec<u32> = Vec::new();
    for (f, l) in features.iter().zip(labels) {
        for y in 0..f.height() {
            for x in 0..f.width() {
                let label = l.at(y, x);
                if label == IGNORE_INDEX {
                    continue;
                }
                if label as usize >= num_classes {
                    return Err(Error::invalid(format!(
                        "label {label} out of range for {num_classes} classes"
                    )));
                }
                xs.push(f.pixel(y, x));
                ys.push(label);
            }
        }
    }
    if xs.is_empty() {
        return Err(Error::invalid("all labels are ignored"));
    }

    let probe = ProbeWeights::seeded(ProbeTask::Segmentation, in_dim, num_classes, hp.seed);
    let n_matrix = probe.matrix.len();
    let mut params: Vec<f64> = probe.matrix.iter().chain(&probe.bias).cloned().collect();
    let mut adam = FlatAdam::new(params.len());
    let inv_n = 1.0 / xs.len() as f64;
    let mut logits = vec![0.0f64; num_classes];

    for _ in 0..hp.steps {
        let mut grads = vec![0.0f64; params.len()];
        for (x, &y) in xs.iter().zip(&ys) {
            logits.copy_from_slice(&params[n_matrix..]);
            for (ci, &v) in x.iter().enumerate() {
                let row = &params[ci * num_classes..(ci + 1) * num_classes];
                for (l, &w) in logits.iter_mut().zip(row) {
                    *l += v as f64 * w;
                }
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for l in logits.iter_mut() {
                *l = (*l - max).exp();
                denom += *l;
            }
            for k in 0..num_classes {
                let p = logits[k] / denom;
                let delta = (p - if k == y as usize { 1.0 } else { 0.0 }) * inv_n;
                for (ci, &v) in x.iter().enumerate() {
                    grads[ci * num_classes + k] += delta * v as f64;
                }
                grads[n_matrix + k] += delta;
            }
        }
        adam.update(&mut params, &grads, hp.learning_rate);
    }

    Ok(ProbeWeights {
        task: ProbeTask::Segmentation,
        in_dim,
        out_dim: num_classes,
        matrix: params[..n_matrix].to_vec(),
        bias: params[n_matrix..].to_vec(),
    })
}

/// Mean-squared-error fit of the depth head on valid (positive) ground
/// truth, through the softplus output.
pub fn fit_depth_probe(
    features: &[FeatureMap],
    labels: &[DepthMap],
    hp: ProbeHyperparams,
) -> Result<ProbeWeights> {
    if features.len() != labels.len() {
        return Err(Error::invalid("feature/label count mismatch"));
    }
    let in_dim = collect_pixels(features, |i| (labels[i].height, labels[i].width))?;

    let mut xs: Vec<&[f32]> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    for (f, l) in features.iter().zip(labels) {
        for y in 0..f.height() {
            for x in 0..f.width() {
                let depth = l.data[y * l.width + x];
                if depth <= 0.0 {
                    continue;
                }
                xs.push(f.pixel(y, x));
                ys.push(depth as f64);
            }
        }
    }
    if xs.is_empty() {
        return Err(Error::invalid("no valid depth labels"));
    }

    let probe = ProbeWeights::seeded(ProbeTask::Depth, in_dim, 1, hp.seed);
    let n_matrix = probe.matrix.len();
    let mut params: Vec<f64> = probe.matrix.iter().chain(&probe.bias).cloned().collect();
    let mut adam = FlatAdam::new(params.len());
    let inv_n = 1.0 / xs.len() as f64;

    for _ in 0..hp.steps {
        let mut grads = vec![0.0f64; params.len()];
        for (x, &y) in xs.iter().zip(&ys) {
            let mut z = params[n_matrix];
            for (ci, &v) in x.iter().enumerate() {
                z += v as f64 * params[ci];
            }
            let pred = softplus(z);
            let sigmoid = 1.0 / (1.0 + (-z).exp());
            let delta = 2.0 * (pred - y) * sigmoid * inv_n;
            for (ci, &v) in x.iter().enumerate() {
                grads[ci] += delta * v as f64;
            }
            grads[n_matrix] += delta;
        }
        adam.update(&mut params, &grads, hp.learning_rate);
    }

    Ok(ProbeWeights {
        task: ProbeTask::Depth,
        in_dim,
        out_dim: 1,
        matrix: params[..n_matrix].to_vec(),
        bias: params[n_matrix..].to_vec(),
    })
}
