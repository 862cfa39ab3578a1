//! Training-free resizers.
//!
//! Both use the align-corners=false convention: the source coordinate for a
//! destination index is `(dst + 0.5) * src/dst - 0.5`, clamped to the valid
//! range. Nearest selection rounds half down (ties toward the smaller index).

use super::Raster;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[inline]
pub(crate) fn src_coord(dst: usize, src_size: usize, dst_size: usize) -> f64 {
    (dst as f64 + 0.5) * (src_size as f64 / dst_size as f64) - 0.5
}

/// Nearest source index under the shared coordinate convention.
#[inline]
pub(crate) fn nearest_index(dst: usize, src_size: usize, dst_size: usize) -> usize {
    let s = src_coord(dst, src_size, dst_size);
    let idx = (s - 0.5).ceil();
    idx.clamp(0.0, (src_size - 1) as f64) as usize
}

#[inline]
fn bilinear_axis(dst: usize, src_size: usize, dst_size: usize) -> (usize, usize, f64) {
    let s = src_coord(dst, src_size, dst_size).clamp(0.0, (src_size - 1) as f64);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(src_size - 1);
    (i0, i1, s - i0 as f64)
}

fn check_target(out_h: usize, out_w: usize) -> Result<()> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("target size must be at least 1x1"));
    }
    Ok(())
}

/// Per-channel bilinear interpolation. Identity when sizes already match.
pub fn resize_bilinear<T: Raster>(input: &T, out_h: usize, out_w: usize) -> Result<T> {
    check_target(out_h, out_w)?;
    let (h, w, c) = input.dims();
    if (h, w) == (out_h, out_w) {
        return T::from_raw(h, w, c, input.raw().to_vec());
    }
    let src = input.raw();
    let mut data = vec![0.0f32; out_h * out_w * c];
    let cols: Vec<(usize, usize, f64)> = (0..out_w).map(|x| bilinear_axis(x, w, out_w)).collect();
    for oy in 0..out_h {
        let (y0, y1, fy) = bilinear_axis(oy, h, out_h);
        for (ox, &(x0, x1, fx)) in cols.iter().enumerate() {
            let base00 = (y0 * w + x0) * c;
            let base01 = (y0 * w + x1) * c;
            let base10 = (y1 * w + x0) * c;
            let base11 = (y1 * w + x1) * c;
            let out_base = (oy * out_w + ox) * c;
            for ch in 0..c {
                let top = src[base00 + ch] as f64 * (1.0 - fx) + src[base01 + ch] as f64 * fx;
                let bot = src[base10 + ch] as f64 * (1.0 - fx) + src[base11 + ch] as f64 * fx;
                data[out_base + ch] = (top * (1.0 - fy) + bot * fy) as f32;
            }
        }
    }
    T::from_raw(out_h, out_w, c, data)
}

/// Nearest-source-pixel resize under the same coordinate convention.
pub fn resize_nearest<T: Raster>(input: &T, out_h: usize, out_w: usize) -> Result<T> {
    check_target(out_h, out_w)?;
    let (h, w, c) = input.dims();
    if (h, w) == (out_h, out_w) {
        return T::from_raw(h, w, c, input.raw().to_vec());
    }
    let src = input.raw();
    let mut data = vec![0.0f32; out_h * out_w * c];
    let cols: Vec<usize> = (0..out_w).map(|x| nearest_index(x, w, out_w)).collect();
    for oy in 0..out_h {
        let sy = nearest_index(oy, h, out_h);
        for (ox, &sx) in cols.iter().enumerate() {
            let src_base = (sy * w + sx) * c;
            let out_base = (oy * out_w + ox) * c;
            data[out_base..out_base + c].copy_from_slice(&src[src_base..src_base + c]);
        }
    }
    T::from_raw(out_h, out_w, c, data)
}

/// Per-axis fractional coverage weights for area pooling: for each target
/// index, the overlapped source indices with their normalized overlap.
pub(crate) fn area_axis_weights(src_size: usize, dst_size: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src_size as f64 / dst_size as f64;
    (0..dst_size)
        .map(|i| {
            let lo = i as f64 * scale;
            let hi = (i + 1) as f64 * scale;
            let mut weights = Vec::new();
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(src_size);
            for s in first..last {
                let overlap = hi.min((s + 1) as f64) - lo.max(s as f64);
                if overlap > 0.0 {
                    weights.push((s, overlap / scale));
                }
            }
            weights
        })
        .collect()
}

pub(crate) fn area_downsample_tensor(input: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let row_w = area_axis_weights(input.h, out_h);
    let col_w = area_axis_weights(input.w, out_w);
    let mut out = Tensor::zeros(out_h, out_w, input.c);
    for oy in 0..out_h {
        for ox in 0..out_w {
            let acc = out.pixel_mut(oy, ox);
            for &(sy, wy) in &row_w[oy] {
                for &(sx, wx) in &col_w[ox] {
                    let weight = wy * wx;
                    for (a, &v) in acc.iter_mut().zip(input.pixel(sy, sx)) {
                        *a += weight * v;
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`area_downsample_tensor`]: spreads a gradient on the pooled
/// grid back over the source footprints with the same weights.
pub(crate) fn area_downsample_adjoint(grad_out: &Tensor, in_h: usize, in_w: usize) -> Tensor {
    let row_w = area_axis_weights(in_h, grad_out.h);
    let col_w = area_axis_weights(in_w, grad_out.w);
    let mut grad_in = Tensor::zeros(in_h, in_w, grad_out.c);
    for oy in 0..grad_out.h {
        for ox in 0..grad_out.w {
            let g = grad_out.pixel(oy, ox);
            for &(sy, wy) in &row_w[oy] {
                for &(sx, wx) in &col_w[ox] {
                    let weight = wy * wx;
                    for (a, &v) in grad_in.pixel_mut(sy, sx).iter_mut().zip(g) {
                        *a += weight * v;
                    }
                }
            }
        }
    }
    grad_in
}

/// Area-average pooling of a feature map over each target cell's pixel
/// footprint. Exact block mean at integer ratios.
pub fn area_downsample(
    input: &super::FeatureMap,
    out_h: usize,
    out_w: usize,
) -> Result<super::FeatureMap> {
    check_target(out_h, out_w)?;
    if out_h > input.height() || out_w > input.width() {
        return Err(Error::invalid(format!(
            "area pooling target {out_h}x{out_w} exceeds source {}x{}",
            input.height(),
            input.width()
        )));
    }
    let pooled = area_downsample_tensor(&input.to_tensor(), out_h, out_w);
    super::FeatureMap::from_tensor(&pooled)
}
