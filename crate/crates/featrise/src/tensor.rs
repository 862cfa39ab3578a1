//! Internal f64 grid tensor used by the model math.
//!
//! Layout is row-major `[h x w x c]`, channel-fastest — the same layout the
//! public containers use, so conversions are straight copies.

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Tensor {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Tensor {
            h,
            w,
            c,
            data: vec![0.0; h * w * c],
        }
    }

    pub fn from_data(h: usize, w: usize, c: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), h * w * c);
        Tensor { h, w, c, data }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.data[(y * self.w + x) * self.c + ch]
    }

    #[allow(dead_code)] // test helper
    #[inline]
    pub fn at_mut(&mut self, y: usize, x: usize, ch: usize) -> &mut f64 {
        &mut self.data[(y * self.w + x) * self.c + ch]
    }

    /// Channel vector at one spatial location.
    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let base = (y * self.w + x) * self.c;
        &self.data[base..base + self.c]
    }

    #[inline]
    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [f64] {
        let base = (y * self.w + x) * self.c;
        &mut self.data[base..base + self.c]
    }

    /// Concatenate along the channel axis. Spatial sizes must match.
    pub fn concat_channels(parts: &[&Tensor]) -> Tensor {
        let (h, w) = (parts[0].h, parts[0].w);
        let c: usize = parts.iter().map(|t| t.c).sum();
        let mut out = Tensor::zeros(h, w, c);
        for y in 0..h {
            for x in 0..w {
                let dst = out.pixel_mut(y, x);
                let mut off = 0;
                for t in parts {
                    debug_assert!(t.h == h && t.w == w);
                    dst[off..off + t.c].copy_from_slice(t.pixel(y, x));
                    off += t.c;
                }
            }
        }
        out
    }

    /// Split channel gradient back into per-part gradients (adjoint of concat).
    pub fn split_channels(&self, sizes: &[usize]) -> Vec<Tensor> {
        debug_assert_eq!(sizes.iter().sum::<usize>(), self.c);
        let mut outs: Vec<Tensor> = sizes
            .iter()
            .map(|&c| Tensor::zeros(self.h, self.w, c))
            .collect();
        for y in 0..self.h {
            for x in 0..self.w {
                let src = self.pixel(y, x);
                let mut off = 0;
                for (i, &c) in sizes.iter().enumerate() {
                    outs[i].pixel_mut(y, x).copy_from_slice(&src[off..off + c]);
                    off += c;
                }
            }
        }
        outs
    }
}
