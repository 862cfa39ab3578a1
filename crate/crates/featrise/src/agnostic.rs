//! Feature-agnostic convolution.
//!
//! Every input channel is correlated with a shared learned basis of M
//! filters, the M responses are softmax-normalized per location and channel,
//! and the resulting distributions are averaged over the input channels.
//! The output therefore always has M channels regardless of the input
//! dimensionality, and is invariant to permutations or whole-set
//! duplications of the input channels.

use rand::{Rng, SeedableRng};

use crate::error::{Error, Result};
use crate::feature_io::FeatureMap;
use crate::tensor::Tensor;

/// M learned k x k filters applied independently to every input channel.
#[derive(Debug, Clone)]
pub struct KernelBasis {
    m: usize,
    k: usize,
    filters: Vec<f64>,
}

impl KernelBasis {
    pub fn new(m: usize, k: usize, filters: Vec<f64>) -> Result<Self> {
        if m == 0 {
            return Err(Error::invalid("basis needs at least one filter"));
        }
        if k == 0 || k % 2 == 0 {
            return Err(Error::invalid(format!(
                "kernel side must be odd and positive, got {k}"
            )));
        }
        if filters.len() != m * k * k {
            return Err(Error::invalid(format!(
                "expected {} filter values, got {}",
                m * k * k,
                filters.len()
            )));
        }
        if !filters.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("filters contain non-finite values"));
        }
        Ok(KernelBasis { m, k, filters })
    }

    /// Seeded initialization, uniform in [-1/k, 1/k].
    pub fn seeded(m: usize, k: usize, seed: u64) -> Result<Self> {
        if k == 0 || k % 2 == 0 {
            return Err(Error::invalid(format!(
                "kernel side must be odd and positive, got {k}"
            )));
        }
        let bound = 1.0 / k as f64;
        let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
        let filters = (0..m * k * k).map(|_| rng.gen_range(-bound..bound)).collect();
        KernelBasis::new(m, k, filters)
    }

    pub fn num_filters(&self) -> usize {
        self.m
    }

    pub fn kernel_size(&self) -> usize {
        self.k
    }

    pub fn filters(&self) -> &[f64] {
        &self.filters
    }

    pub(crate) fn filters_mut(&mut self) -> &mut [f64] {
        &mut self.filters
    }

    #[inline]
    fn filter(&self, j: usize) -> &[f64] {
        &self.filters[j * self.k * self.k..(j + 1) * self.k * self.k]
    }
}

/// Per-(location, channel) softmax distributions kept for the backward pass.
pub(crate) struct AgnosticCache {
    /// [h*w x n x m], probability of filter j for input channel i at a cell.
    probs: Vec<f64>,
    n: usize,
}

/// Computes the M correlation responses of one input channel at one cell.
#[inline]
fn channel_logits(input: &Tensor, basis: &KernelBasis, y: usize, x: usize, i: usize, out: &mut [f64]) {
    let k = basis.k;
    let r = k / 2;
    out.fill(0.0);
    for ky in 0..k {
        let sy = y as isize + ky as isize - r as isize;
        if sy < 0 || sy >= input.h as isize {
            continue;
        }
        for kx in 0..k {
            let sx = x as isize + kx as isize - r as isize;
            if sx < 0 || sx >= input.w as isize {
                continue;
            }
            let v = input.at(sy as usize, sx as usize, i);
            let tap = ky * k + kx;
            for (j, o) in out.iter_mut().enumerate() {
                *o += v * basis.filter(j)[tap];
            }
        }
    }
}

#[inline]
fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

pub(crate) fn forward(input: &Tensor, basis: &KernelBasis, keep_cache: bool) -> (Tensor, Option<AgnosticCache>) {
    let (h, w, n) = (input.h, input.w, input.c);
    let m = basis.m;
    let mut out = Tensor::zeros(h, w, m);
    let mut cache = if keep_cache {
        Some(AgnosticCache {
            probs: vec![0.0; h * w * n * m],
            n,
        })
    } else {
        None
    };
    let inv_n = 1.0 / n as f64;
    let mut logits = vec![0.0f64; m];
    for y in 0..h {
        for x in 0..w {
            let acc = out.pixel_mut(y, x);
            for i in 0..n {
                channel_logits(input, basis, y, x, i, &mut logits);
                softmax_in_place(&mut logits);
                for (a, &s) in acc.iter_mut().zip(logits.iter()) {
                    *a += s * inv_n;
                }
                if let Some(c) = cache.as_mut() {
                    let base = ((y * w + x) * n + i) * m;
                    c.probs[base..base + m].copy_from_slice(&logits);
                }
            }
        }
    }
    (out, cache)
}

/// Gradient of a scalar loss with respect to the filter basis, given the
/// gradient at the layer output. The input features receive no gradient
/// (they are data, never parameters).
pub(crate) fn backward(
    input: &Tensor,
    basis: &KernelBasis,
    cache: &AgnosticCache,
    grad_out: &Tensor,
) -> Vec<f64> {
    let (h, w, n) = (input.h, input.w, input.c);
    let m = basis.m;
    let k = basis.k;
    let r = k / 2;
    debug_assert_eq!(cache.n, n);
    let inv_n = 1.0 / n as f64;
    let mut grad_filters = vec![0.0f64; m * k * k];
    let mut dlogit = vec![0.0f64; m];
    for y in 0..h {
        for x in 0..w {
            let g = grad_out.pixel(y, x);
            for i in 0..n {
                let base = ((y * w + x) * n + i) * m;
                let probs = &cache.probs[base..base + m];
                let dot: f64 = probs.iter().zip(g).map(|(&s, &gv)| s * gv * inv_n).sum();
                for j in 0..m {
                    dlogit[j] = probs[j] * (g[j] * inv_n - dot);
                }
                for ky in 0..k {
                    let sy = y as isize + ky as isize - r as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let sx = x as isize + kx as isize - r as isize;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let v = input.at(sy as usize, sx as usize, i);
                        let tap = ky * k + kx;
                        for j in 0..m {
                            grad_filters[j * k * k + tap] += dlogit[j] * v;
                        }
                    }
                }
            }
        }
    }
    grad_filters
}

/// Maps a feature map with any channel count N to a canonical M-channel map.
/// Output values are strictly positive and sum to one at every location.
pub fn agnostic_conv(p: &FeatureMap, basis: &KernelBasis) -> Result<FeatureMap> {
    let (out, _) = forward(&p.to_tensor(), basis, false);
    FeatureMap::from_tensor(&out)
}
