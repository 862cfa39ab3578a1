//! Local window cross-attention.
//!
//! Every output pixel maps to continuous low-res coordinates under the
//! shared align-corners=false convention, attends to the (2r+1)^2 key/value
//! cells around its nearest cell (clamped at borders, so edge windows
//! shrink), and outputs the softmax-weighted combination of the window
//! values. With r = 0 this degenerates to nearest-neighbor replication.

use rayon::prelude::*;

use crate::feature_io::resize::nearest_index;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
struct Window {
    y0: usize,
    y1: usize, // inclusive
    x0: usize,
    x1: usize,
}

impl Window {
    #[inline]
    fn len(&self) -> usize {
        (self.y1 - self.y0 + 1) * (self.x1 - self.x0 + 1)
    }
}

#[inline]
fn window_at(
    u: usize,
    v: usize,
    out_h: usize,
    out_w: usize,
    h: usize,
    w: usize,
    radius: usize,
) -> Window {
    let cy = nearest_index(u, h, out_h);
    let cx = nearest_index(v, w, out_w);
    Window {
        y0: cy.saturating_sub(radius),
        y1: (cy + radius).min(h - 1),
        x0: cx.saturating_sub(radius),
        x1: (cx + radius).min(w - 1),
    }
}

pub(crate) struct AttentionCache {
    radius: usize,
    /// Softmax weights per query, padded to the maximal window size.
    probs: Vec<f64>,
    stride: usize,
}

/// queries [H x W x d], keys [h x w x d], values [h x w x c] -> [H x W x c].
/// Spatial agreement of keys/values and the d match are the caller's duty.
pub(crate) fn forward(
    queries: &Tensor,
    keys: &Tensor,
    values: &Tensor,
    radius: usize,
    want_cache: bool,
) -> (Tensor, Option<AttentionCache>) {
    debug_assert_eq!(queries.c, keys.c);
    debug_assert!(keys.h == values.h && keys.w == values.w);
    let (out_h, out_w) = (queries.h, queries.w);
    let (h, w) = (keys.h, keys.w);
    let d = queries.c;
    let scale = 1.0 / (d as f64).sqrt();
    let side = 2 * radius + 1;
    let stride = side * side;

    let mut out = Tensor::zeros(out_h, out_w, values.c);
    let mut probs = if want_cache {
        vec![0.0f64; out_h * out_w * stride]
    } else {
        Vec::new()
    };

    let compute_row = |u: usize, out_row: &mut [f64], probs_row: &mut [f64]| {
        let c = values.c;
        let mut logits = vec![0.0f64; stride];
        for v in 0..out_w {
            let win = window_at(u, v, out_h, out_w, h, w, radius);
            let q = queries.pixel(u, v);
            let n = win.len();
            let mut idx = 0;
            let mut max = f64::NEG_INFINITY;
            for ky in win.y0..=win.y1 {
                for kx in win.x0..=win.x1 {
                    let mut dot = 0.0;
                    for (a, b) in q.iter().zip(keys.pixel(ky, kx)) {
                        dot += a * b;
                    }
                    let l = dot * scale;
                    logits[idx] = l;
                    if l > max {
                        max = l;
                    }
                    idx += 1;
                }
            }
            let mut denom = 0.0;
            for l in logits[..n].iter_mut() {
                *l = (*l - max).exp();
                denom += *l;
            }
            let acc = &mut out_row[v * c..(v + 1) * c];
            let mut idx = 0;
            for ky in win.y0..=win.y1 {
                for kx in win.x0..=win.x1 {
                    let weight = logits[idx] / denom;
                    for (a, &val) in acc.iter_mut().zip(values.pixel(ky, kx)) {
                        *a += weight * val;
                    }
                    if !probs_row.is_empty() {
                        probs_row[v * stride + idx] = weight;
                    }
                    idx += 1;
                }
            }
        }
    };

    let out_row_len = out_w * values.c;
    let probs_row_len = out_w * stride;
    if want_cache {
        if out_h * out_w * stride >= 1 << 14 {
            out.data
                .par_chunks_mut(out_row_len)
                .zip(probs.par_chunks_mut(probs_row_len))
                .enumerate()
                .for_each(|(u, (orow, prow))| compute_row(u, orow, prow));
        } else {
            for (u, (orow, prow)) in out
                .data
                .chunks_mut(out_row_len)
                .zip(probs.chunks_mut(probs_row_len))
                .enumerate()
            {
                compute_row(u, orow, prow);
            }
        }
    } else if out_h * out_w * stride >= 1 << 14 {
        out.data
            .par_chunks_mut(out_row_len)
            .enumerate()
            .for_each(|(u, orow)| compute_row(u, orow, &mut []));
    } else {
        for (u, orow) in out.data.chunks_mut(out_row_len).enumerate() {
            compute_row(u, orow, &mut []);
        }
    }

    let cache = want_cache.then_some(AttentionCache {
        radius,
        probs,
        stride,
    });
    (out, cache)
}

/// Gradients with respect to queries and keys. Values are raw input features
/// and never carry a gradient.
pub(crate) fn backward(
    queries: &Tensor,
    keys: &Tensor,
    values: &Tensor,
    cache: &AttentionCache,
    grad_out: &Tensor,
) -> (Tensor, Tensor) {
    let (out_h, out_w) = (queries.h, queries.w);
    let (h, w) = (keys.h, keys.w);
    let d = queries.c;
    let scale = 1.0 / (d as f64).sqrt();
    let radius = cache.radius;
    let stride = cache.stride;

    let mut grad_q = Tensor::zeros(out_h, out_w, d);
    let mut grad_k = Tensor::zeros(h, w, d);
    let mut dprob = vec![0.0f64; stride];
    let mut dlogit = vec![0.0f64; stride];

    for u in 0..out_h {
        for v in 0..out_w {
            let win = window_at(u, v, out_h, out_w, h, w, radius);
            let n = win.len();
            let probs = &cache.probs[(u * out_w + v) * stride..(u * out_w + v) * stride + n];
            let g = grad_out.pixel(u, v);

            let mut idx = 0;
            for ky in win.y0..=win.y1 {
                for kx in win.x0..=win.x1 {
                    let mut dot = 0.0;
                    for (a, b) in g.iter().zip(values.pixel(ky, kx)) {
                        dot += a * b;
                    }
                    dprob[idx] = dot;
                    idx += 1;
                }
            }
            let weighted: f64 = probs.iter().zip(&dprob[..n]).map(|(&p, &dp)| p * dp).sum();
            for i in 0..n {
                dlogit[i] = probs[i] * (dprob[i] - weighted);
            }

            let q = queries.pixel(u, v);
            let gq = grad_q.pixel_mut(u, v);
            let mut idx = 0;
            for ky in win.y0..=win.y1 {
                for kx in win.x0..=win.x1 {
                    let dl = dlogit[idx] * scale;
                    for ((gqv, &kv), (gkv, &qv)) in gq
                        .iter_mut()
                        .zip(keys.pixel(ky, kx))
                        .zip(grad_k.pixel_mut(ky, kx).iter_mut().zip(q))
                    {
                        *gqv += dl * kv;
                        *gkv += dl * qv;
                    }
                    idx += 1;
                }
            }
        }
    }
    (grad_q, grad_k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_tensor(h: usize, w: usize, c: usize, seed: u64) -> Tensor {
        let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
        Tensor::from_data(h, w, c, (0..h * w * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn hand_set_logits_give_hand_computed_mixture() {
        // 1x2 grid of scalar values [0, 10]; queries/keys chosen so that the
        // logits at the probe pixel are (0, ln 3) -> weights (0.25, 0.75).
        let d = 1;
        let queries = Tensor::from_data(1, 2, d, vec![3.0_f64.ln(), 0.0]);
        let keys = Tensor::from_data(1, 2, d, vec![0.0, 1.0]);
        let values = Tensor::from_data(1, 2, 1, vec![0.0, 10.0]);
        // scale = 1/sqrt(1) = 1; logits for pixel (0,0): q*k0 = 0, q*k1 = ln3
        let (out, _) = forward(&queries, &keys, &values, 1, false);
        assert!((out.at(0, 0, 0) - 7.5).abs() < 1e-9);
    }

    #[test]
    fn radius_zero_is_nearest_replication() {
        let keys = random_tensor(3, 4, 5, 1);
        let values = random_tensor(3, 4, 2, 2);
        let queries = random_tensor(9, 8, 5, 3);
        let (out, _) = forward(&queries, &keys, &values, 0, false);
        for u in 0..9 {
            for v in 0..8 {
                let sy = nearest_index(u, 3, 9);
                let sx = nearest_index(v, 4, 8);
                assert_eq!(out.pixel(u, v), values.pixel(sy, sx));
            }
        }
    }

    #[test]
    fn equal_values_pass_through_unchanged() {
        let queries = random_tensor(5, 5, 4, 4);
        let keys = random_tensor(2, 2, 4, 5);
        let mut values = Tensor::zeros(2, 2, 3);
        for y in 0..2 {
            for x in 0..2 {
                values.pixel_mut(y, x).copy_from_slice(&[1.0, -2.0, 0.5]);
            }
        }
        let (out, _) = forward(&queries, &keys, &values, 1, false);
        for v in out.data.chunks(3) {
            assert!((v[0] - 1.0).abs() < 1e-12);
            assert!((v[1] + 2.0).abs() < 1e-12);
            assert!((v[2] - 0.5).abs() < 1e-12);
        }
    }

    /// Brute-force reference evaluating the definition directly.
    fn oracle(queries: &Tensor, keys: &Tensor, values: &Tensor, radius: usize) -> Tensor {
        let mut out = Tensor::zeros(queries.h, queries.w, values.c);
        let scale = 1.0 / (queries.c as f64).sqrt();
        for u in 0..queries.h {
            for v in 0..queries.w {
                let cy = nearest_index(u, keys.h, queries.h);
                let cx = nearest_index(v, keys.w, queries.w);
                let mut cells = Vec::new();
                for ky in 0..keys.h {
                    for kx in 0..keys.w {
                        let within_y = ky as isize >= cy as isize - radius as isize
                            && ky as isize <= cy as isize + radius as isize;
                        let within_x = kx as isize >= cx as isize - radius as isize
                            && kx as isize <= cx as isize + radius as isize;
                        if within_y && within_x {
                            cells.push((ky, kx));
                        }
                    }
                }
                let logits: Vec<f64> = cells
                    .iter()
                    .map(|&(ky, kx)| {
                        queries
                            .pixel(u, v)
                            .iter()
                            .zip(keys.pixel(ky, kx))
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            * scale
                    })
                    .collect();
                let denom: f64 = logits.iter().map(|l| l.exp()).sum();
                for (&(ky, kx), &l) in cells.iter().zip(&logits) {
                    let weight = l.exp() / denom;
                    for (o, &val) in out.pixel_mut(u, v).iter_mut().zip(values.pixel(ky, kx)) {
                        *o += weight * val;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_brute_force_oracle_on_random_instances() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(50);
        for trial in 0..100 {
            let h = rng.gen_range(1..=5);
            let w = rng.gen_range(1..=5);
            let oh = rng.gen_range(1..=9);
            let ow = rng.gen_range(1..=9);
            let d = rng.gen_range(1..=4);
            let c = rng.gen_range(1..=3);
            let radius = rng.gen_range(0..=2);
            let queries = random_tensor(oh, ow, d, 100 + trial);
            let keys = random_tensor(h, w, d, 200 + trial);
            let values = random_tensor(h, w, c, 300 + trial);
            let (got, _) = forward(&queries, &keys, &values, radius, false);
            let want = oracle(&queries, &keys, &values, radius);
            for (a, b) in got.data.iter().zip(&want.data) {
                assert!((a - b).abs() < 1e-6, "trial {trial}");
            }
        }
    }

    #[test]
    fn perturbing_cells_outside_window_leaves_pixel_bits_unchanged() {
        let queries = random_tensor(8, 8, 4, 7);
        let keys = random_tensor(4, 4, 4, 8);
        let values = random_tensor(4, 4, 3, 9);
        let radius = 1;
        let (base, _) = forward(&queries, &keys, &values, radius, false);

        // probe pixel (0, 0): window is cells {0,1} x {0,1}; perturb (3, 3)
        let mut keys2 = keys.clone();
        let mut values2 = values.clone();
        for ch in 0..4 {
            *keys2.at_mut(3, 3, ch) += 5.0;
        }
        for ch in 0..3 {
            *values2.at_mut(3, 3, ch) -= 7.0;
        }
        let (changed, _) = forward(&queries, &keys2, &values2, radius, false);
        assert_eq!(base.pixel(0, 0), changed.pixel(0, 0));
        assert_ne!(base.pixel(7, 7), changed.pixel(7, 7));
    }

    #[test]
    fn weights_are_convex_and_outputs_in_hull() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(77);
        for trial in 0..30 {
            let queries = random_tensor(6, 6, 3, 400 + trial);
            let keys = random_tensor(3, 3, 3, 500 + trial);
            let values = random_tensor(3, 3, 2, 600 + trial);
            let radius = rng.gen_range(0..=2);
            let (out, cache) = forward(&queries, &keys, &values, radius, true);
            let cache = cache.unwrap();
            let stride = (2 * radius + 1) * (2 * radius + 1);
            for u in 0..6 {
                for v in 0..6 {
                    let win = window_at(u, v, 6, 6, 3, 3, radius);
                    let probs = &cache.probs[(u * 6 + v) * stride..(u * 6 + v) * stride + win.len()];
                    let sum: f64 = probs.iter().sum();
                    assert!(probs.iter().all(|&p| p > 0.0));
                    assert!((sum - 1.0).abs() < 1e-5);
                    for ch in 0..2 {
                        let mut lo = f64::MAX;
                        let mut hi = f64::MIN;
                        for ky in win.y0..=win.y1 {
                            for kx in win.x0..=win.x1 {
                                lo = lo.min(values.at(ky, kx, ch));
                                hi = hi.max(values.at(ky, kx, ch));
                            }
                        }
                        let o = out.at(u, v, ch);
                        assert!(o >= lo - 1e-5 && o <= hi + 1e-5);
                    }
                }
            }
        }
    }

    #[test]
    fn query_and_key_gradients_match_finite_differences() {
        let mut queries = random_tensor(4, 4, 3, 31);
        let mut keys = random_tensor(2, 2, 3, 32);
        let values = random_tensor(2, 2, 2, 33);
        let mut rng = rand::rngs::StdRng::seed_from_u64(34);
        let loss_w: Vec<f64> = (0..4 * 4 * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss = |q: &Tensor, k: &Tensor| -> f64 {
            forward(q, k, &values, 1, false)
                .0
                .data
                .iter()
                .zip(&loss_w)
                .map(|(a, b)| a * b)
                .sum()
        };

        let (_, cache) = forward(&queries, &keys, &values, 1, true);
        let grad_out = Tensor::from_data(4, 4, 2, loss_w.clone());
        let (gq, gk) = backward(&queries, &keys, &values, cache.as_ref().unwrap(), &grad_out);

        let eps = 1e-5;
        for idx in 0..queries.data.len() {
            let orig = queries.data[idx];
            queries.data[idx] = orig + eps;
            let plus = loss(&queries, &keys);
            queries.data[idx] = orig - eps;
            let minus = loss(&queries, &keys);
            queries.data[idx] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let denom = (gq.data[idx].abs() + numeric.abs()).max(1e-6);
            assert!((gq.data[idx] - numeric).abs() / denom < 1e-4, "query {idx}");
        }
        for idx in 0..keys.data.len() {
            let orig = keys.data[idx];
            keys.data[idx] = orig + eps;
            let plus = loss(&queries, &keys);
            keys.data[idx] = orig - eps;
            let minus = loss(&queries, &keys);
            keys.data[idx] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let denom = (gk.data[idx].abs() + numeric.abs()).max(1e-6);
            assert!((gk.data[idx] - numeric).abs() / denom < 1e-4, "key {idx}");
        }
    }
}
