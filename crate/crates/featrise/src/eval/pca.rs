//! PCA projection of a feature map onto its top three principal components,
//! rendered as an RGB image.

use crate::error::{Error, Result};
use crate::feature_io::{FeatureMap, GuidanceImage};

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// eigenvalues in descending order with matching eigenvectors (columns).
fn jacobi_eigen(mut a: Vec<f64>, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0f64; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..60 {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += a[p * n + q] * a[p * n + q];
            }
        }
        if off.sqrt() < 1e-14 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let tau = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].partial_cmp(&a[i * n + i]).unwrap());
    let eigvals: Vec<f64> = order.iter().map(|&i| a[i * n + i]).collect();
    let mut eigvecs = vec![0.0f64; n * n];
    for (col, &src) in order.iter().enumerate() {
        for k in 0..n {
            eigvecs[k * n + col] = v[k * n + src];
        }
    }
    (eigvals, eigvecs)
}

/// Projects `features` onto the top three principal components of
/// `basis_source` (or of the features themselves when absent). Each output
/// channel is min-max normalized to [0, 1]; degenerate components render as
/// flat 0.5. The component sign is fixed so the largest-magnitude loading
/// is positive.
pub fn pca_rgb(features: &FeatureMap, basis_source: Option<&FeatureMap>) -> Result<GuidanceImage> {
    let basis = basis_source.unwrap_or(features);
    let c = features.channels();
    if c < 3 {
        return Err(Error::invalid("PCA visualization needs at least 3 channels"));
    }
    if basis.channels() != c {
        return Err(Error::shape("basis and features must share channels"));
    }
    let n = basis.height() * basis.width();
    if n < 3 {
        return Err(Error::invalid("PCA basis needs at least 3 spatial samples"));
    }

    let mut mean = vec![0.0f64; c];
    for y in 0..basis.height() {
        for x in 0..basis.width() {
            for (m, &v) in mean.iter_mut().zip(basis.pixel(y, x)) {
                *m += v as f64;
            }
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }

    let mut cov = vec![0.0f64; c * c];
    let mut centered = vec![0.0f64; c];
    for y in 0..basis.height() {
        for x in 0..basis.width() {
            for (cd, (&v, &m)) in centered.iter_mut().zip(basis.pixel(y, x).iter().zip(&mean)) {
                *cd = v as f64 - m;
            }
            for i in 0..c {
                let ci = centered[i];
                for j in i..c {
                    cov[i * c + j] += ci * centered[j];
                }
            }
        }
    }
    for i in 0..c {
        for j in i..c {
            cov[i * c + j] /= n as f64;
            cov[j * c + i] = cov[i * c + j];
        }
    }

    let (_eigvals, eigvecs) = jacobi_eigen(cov, c);

    // top three components with a deterministic sign convention
    let mut components = vec![vec![0.0f64; c]; 3];
    for (k, comp) in components.iter_mut().enumerate() {
        for i in 0..c {
            comp[i] = eigvecs[i * c + k];
        }
        let mut dominant = 0usize;
        for i in 0..c {
            if comp[i].abs() > comp[dominant].abs() {
                dominant = i;
            }
        }
        if comp[dominant] < 0.0 {
            for v in comp.iter_mut() {
                *v = -*v;
            }
        }
    }

    let (h, w) = (features.height(), features.width());
    let mut projected = vec![0.0f64; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            let f = features.pixel(y, x);
            for (k, comp) in components.iter().enumerate() {
                let mut acc = 0.0;
                for i in 0..c {
                    acc += (f[i] as f64 - mean[i]) * comp[i];
                }
                projected[(y * w + x) * 3 + k] = acc;
            }
        }
    }

    let mut data = vec![0.0f32; h * w * 3];
    for k in 0..3 {
        let mut lo = f64::MAX;
        let mut hi = f64::MIN;
        for px in 0..h * w {
            let v = projected[px * 3 + k];
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let range = hi - lo;
        for px in 0..h * w {
            data[px * 3 + k] = if range < 1e-9 {
                0.5
            } else {
                ((projected[px * 3 + k] - lo) / range) as f32
            };
        }
    }
    GuidanceImage::new(h, w, data)
}

#[cfg(test)]
pub(crate) fn jacobi_for_tests(a: Vec<f64>, n: usize) -> (Vec<f64>, Vec<f64>) {
    jacobi_eigen(a, n)
}
