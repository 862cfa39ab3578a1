//! Convolution building blocks with explicit backward passes.
//!
//! All convolutions are stride-1 correlations with zero padding. Weight
//! layout is `[k*k*cin*cout]` indexed as `((ky*k + kx)*cin + ci)*cout + co`,
//! so the innermost loops run over contiguous memory.

use rayon::prelude::*;

use crate::tensor::Tensor;

const PARALLEL_THRESHOLD: usize = 1 << 14;

#[derive(Debug, Clone)]
pub(crate) struct Conv2d {
    pub k: usize,
    pub cin: usize,
    pub cout: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn zeros(k: usize, cin: usize, cout: usize) -> Self {
        Conv2d {
            k,
            cin,
            cout,
            weight: vec![0.0; k * k * cin * cout],
            bias: vec![0.0; cout],
        }
    }

    pub fn seeded(k: usize, cin: usize, cout: usize, rng: &mut impl rand::Rng) -> Self {
        let bound = 1.0 / ((k * k * cin) as f64).sqrt();
        let mut layer = Conv2d::zeros(k, cin, cout);
        for v in layer.weight.iter_mut() {
            *v = rng.gen_range(-bound..bound);
        }
        for v in layer.bias.iter_mut() {
            *v = rng.gen_range(-bound..bound);
        }
        layer
    }

    pub fn zeros_like(&self) -> Self {
        Conv2d::zeros(self.k, self.cin, self.cout)
    }

    fn forward_row(&self, input: &Tensor, y: usize, out_row: &mut [f64]) {
        let (h, w) = (input.h, input.w);
        let k = self.k;
        let r = (k / 2) as isize;
        let cin = self.cin;
        let cout = self.cout;
        for x in 0..w {
            out_row[x * cout..(x + 1) * cout].copy_from_slice(&self.bias);
        }
        for ky in 0..k {
            let sy = y as isize + ky as isize - r;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            let in_row = &input.data[sy as usize * w * cin..(sy as usize + 1) * w * cin];
            for kx in 0..k {
                let dx = kx as isize - r;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize).min(w as isize - dx) as usize;
                let wslab = &self.weight[(ky * k + kx) * cin * cout..][..cin * cout];
                for x in x_lo..x_hi {
                    let px = &in_row[(x as isize + dx) as usize * cin..][..cin];
                    let acc = &mut out_row[x * cout..][..cout];
                    for (ci, &v) in px.iter().enumerate() {
                        let wrow = &wslab[ci * cout..][..cout];
                        for i in 0..cout {
                            acc[i] += v * wrow[i];
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, input: &Tensor) -> Tensor {
        debug_assert_eq!(input.c, self.cin);
        let (h, w) = (input.h, input.w);
        let mut out = Tensor::zeros(h, w, self.cout);
        let row_len = w * self.cout;
        if h * w * self.cout >= PARALLEL_THRESHOLD {
            out.data
                .par_chunks_mut(row_len)
                .enumerate()
                .for_each(|(y, row)| self.forward_row(input, y, row));
        } else {
            for (y, row) in out.data.chunks_mut(row_len).enumerate() {
                self.forward_row(input, y, row);
            }
        }
        out
    }

    fn grad_input_row(&self, grad_out: &Tensor, iy: usize, grad_row: &mut [f64]) {
        let (h, w) = (grad_out.h, grad_out.w);
        let k = self.k;
        let r = (k / 2) as isize;
        let cin = self.cin;
        let cout = self.cout;
        for ky in 0..k {
            let oy = iy as isize - (ky as isize - r);
            if oy < 0 || oy >= h as isize {
                continue;
            }
            let gout_row = &grad_out.data[oy as usize * w * cout..(oy as usize + 1) * w * cout];
            for kx in 0..k {
                let dx = kx as isize - r;
                // ox = ix - dx must stay within [0, w)
                let ix_lo = dx.max(0) as usize;
                let ix_hi = ((w as isize + dx).min(w as isize)) as usize;
                let wslab = &self.weight[(ky * k + kx) * cin * cout..][..cin * cout];
                for ix in ix_lo..ix_hi {
                    let gout = &gout_row[(ix as isize - dx) as usize * cout..][..cout];
                    let gpix = &mut grad_row[ix * cin..][..cin];
                    for (ci, g) in gpix.iter_mut().enumerate() {
                        let wrow = &wslab[ci * cout..][..cout];
                        let mut acc = 0.0;
                        for i in 0..cout {
                            acc += gout[i] * wrow[i];
                        }
                        *g += acc;
                    }
                }
            }
        }
    }

    /// Accumulates parameter gradients into `grad` and, when requested,
    /// returns the gradient with respect to the layer input.
    pub fn backward(
        &self,
        input: &Tensor,
        grad_out: &Tensor,
        grad: &mut Conv2d,
        need_input_grad: bool,
    ) -> Option<Tensor> {
        debug_assert_eq!(grad_out.c, self.cout);
        let (h, w) = (input.h, input.w);
        let k = self.k;
        let r = (k / 2) as isize;

        // bias gradient
        for y in 0..h {
            for x in 0..w {
                for (b, &g) in grad.bias.iter_mut().zip(grad_out.pixel(y, x)) {
                    *b += g;
                }
            }
        }

        // weight gradient: one streaming pass over the grid per row chunk;
        // the kernel gradient itself is small and stays cache-resident.
        // Fixed chunking keeps the reduction order independent of the
        // thread count.
        let cin = self.cin;
        let cout = self.cout;
        let sweep_rows = |y0: usize, y1: usize, gw: &mut [f64]| {
            for y in y0..y1 {
                for x in 0..w {
                    let gout = grad_out.pixel(y, x);
                    for ky in 0..k {
                        let sy = y as isize + ky as isize - r;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let sx = x as isize + kx as isize - r;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            let px = input.pixel(sy as usize, sx as usize);
                            let wbase = (ky * k + kx) * cin * cout;
                            for (ci, &v) in px.iter().enumerate() {
                                let slot = &mut gw[wbase + ci * cout..wbase + (ci + 1) * cout];
                                for (gwv, &g) in slot.iter_mut().zip(gout) {
                                    *gwv += v * g;
                                }
                            }
                        }
                    }
                }
            }
        };
        if h * w * cout >= PARALLEL_THRESHOLD && h >= 8 {
            const CHUNKS: usize = 8;
            let rows_per = h.div_ceil(CHUNKS);
            let partials: Vec<Vec<f64>> = (0..CHUNKS)
                .into_par_iter()
                .map(|c| {
                    let mut gw = vec![0.0; k * k * cin * cout];
                    let y0 = c * rows_per;
                    let y1 = ((c + 1) * rows_per).min(h);
                    if y0 < y1 {
                        sweep_rows(y0, y1, &mut gw);
                    }
                    gw
                })
                .collect();
            for part in partials {
                for (g, p) in grad.weight.iter_mut().zip(part) {
                    *g += p;
                }
            }
        } else {
            let mut gw = vec![0.0; k * k * cin * cout];
            sweep_rows(0, h, &mut gw);
            for (g, p) in grad.weight.iter_mut().zip(gw) {
                *g += p;
            }
        }

        if !need_input_grad {
            return None;
        }
        let mut grad_in = Tensor::zeros(h, w, cin);
        let row_len = w * cin;
        if h * w * cin >= PARALLEL_THRESHOLD {
            grad_in
                .data
                .par_chunks_mut(row_len)
                .enumerate()
                .for_each(|(iy, row)| self.grad_input_row(grad_out, iy, row));
        } else {
            for (iy, row) in grad_in.data.chunks_mut(row_len).enumerate() {
                self.grad_input_row(grad_out, iy, row);
            }
        }
        Some(grad_in)
    }
}

/// Bounded smooth activation x / sqrt(1 + x^2). Same shape as tanh but a
/// single hardware sqrt instead of a libm call, which matters in the
/// training hot loop.
#[inline]
fn squash(x: f64) -> f64 {
    x / (1.0 + x * x).sqrt()
}

fn squash_forward(t: &mut Tensor) {
    for v in t.data.iter_mut() {
        *v = squash(*v);
    }
}

/// Multiplies a gradient by the activation derivative recovered from the
/// post-activation value: d/dx = (1 - t^2)^(3/2).
fn squash_backward(grad: &mut Tensor, activated: &Tensor) {
    for (g, &t) in grad.data.iter_mut().zip(&activated.data) {
        let s = 1.0 - t * t;
        *g *= s * s.sqrt();
    }
}

/// y = x + conv2(squash(conv1(x)))
#[derive(Debug, Clone)]
pub(crate) struct ResBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

pub(crate) struct ResBlockCache {
    input: Tensor,
    hidden: Tensor, // squash(conv1(x))
}

impl ResBlock {
    pub fn seeded(k: usize, width: usize, rng: &mut impl rand::Rng) -> Self {
        ResBlock {
            conv1: Conv2d::seeded(k, width, width, rng),
            conv2: Conv2d::seeded(k, width, width, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        ResBlock {
            conv1: self.conv1.zeros_like(),
            conv2: self.conv2.zeros_like(),
        }
    }

    pub fn forward(&self, input: &Tensor, cache: Option<&mut Vec<ResBlockCache>>) -> Tensor {
        let mut hidden = self.conv1.forward(input);
        squash_forward(&mut hidden);
        let mut out = self.conv2.forward(&hidden);
        for (o, &x) in out.data.iter_mut().zip(&input.data) {
            *o += x;
        }
        if let Some(caches) = cache {
            caches.push(ResBlockCache {
                input: input.clone(),
                hidden,
            });
        }
        out
    }

    pub fn backward(&self, cache: &ResBlockCache, grad_out: &Tensor, grad: &mut ResBlock) -> Tensor {
        let mut grad_hidden = self
            .conv2
            .backward(&cache.hidden, grad_out, &mut grad.conv2, true)
            .expect("input grad requested");
        squash_backward(&mut grad_hidden, &cache.hidden);
        let mut grad_in = self
            .conv1
            .backward(&cache.input, &grad_hidden, &mut grad.conv1, true)
            .expect("input grad requested");
        for (g, &up) in grad_in.data.iter_mut().zip(&grad_out.data) {
            *g += up;
        }
        grad_in
    }
}

/// Residual block with a 1x1 projection shortcut so the channel count can
/// change: y = shortcut(x) + conv2(squash(conv1(x))).
#[derive(Debug, Clone)]
pub(crate) struct ProjResBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub shortcut: Conv2d,
}

pub(crate) struct ProjResBlockCache {
    input: Tensor,
    hidden: Tensor,
}

impl ProjResBlock {
    pub fn seeded(k: usize, cin: usize, cout: usize, rng: &mut impl rand::Rng) -> Self {
        ProjResBlock {
            conv1: Conv2d::seeded(k, cin, cout, rng),
            conv2: Conv2d::seeded(k, cout, cout, rng),
            shortcut: Conv2d::seeded(1, cin, cout, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        ProjResBlock {
            conv1: self.conv1.zeros_like(),
            conv2: self.conv2.zeros_like(),
            shortcut: self.shortcut.zeros_like(),
        }
    }

    pub fn forward(&self, input: &Tensor, cache: Option<&mut Option<ProjResBlockCache>>) -> Tensor {
        let mut hidden = self.conv1.forward(input);
        squash_forward(&mut hidden);
        let mut out = self.conv2.forward(&hidden);
        let skip = self.shortcut.forward(input);
        for (o, &s) in out.data.iter_mut().zip(&skip.data) {
            *o += s;
        }
        if let Some(slot) = cache {
            *slot = Some(ProjResBlockCache {
                input: input.clone(),
                hidden,
            });
        }
        out
    }

    pub fn backward(
        &self,
        cache: &ProjResBlockCache,
        grad_out: &Tensor,
        grad: &mut ProjResBlock,
    ) -> Tensor {
        let mut grad_hidden = self
            .conv2
            .backward(&cache.hidden, grad_out, &mut grad.conv2, true)
            .expect("input grad requested");
        squash_backward(&mut grad_hidden, &cache.hidden);
        let mut grad_in = self
            .conv1
            .backward(&cache.input, &grad_hidden, &mut grad.conv1, true)
            .expect("input grad requested");
        let skip_grad = self
            .shortcut
            .backward(&cache.input, grad_out, &mut grad.shortcut, true)
            .expect("input grad requested");
        for (g, &s) in grad_in.data.iter_mut().zip(&skip_grad.data) {
            *g += s;
        }
        grad_in
    }
}

/// Stem convolution with the squash activation, then residual blocks.
#[derive(Debug, Clone)]
pub(crate) struct ConvStack {
    pub stem: Conv2d,
    pub blocks: Vec<ResBlock>,
}

pub(crate) struct ConvStackCache {
    input: Tensor,
    stem_out: Tensor, // squash(stem(x))
    block_caches: Vec<ResBlockCache>,
}

impl ConvStack {
    pub fn seeded(k: usize, cin: usize, width: usize, blocks: usize, rng: &mut impl rand::Rng) -> Self {
        ConvStack {
            stem: Conv2d::seeded(k, cin, width, rng),
            blocks: (0..blocks).map(|_| ResBlock::seeded(k, width, rng)).collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        ConvStack {
            stem: self.stem.zeros_like(),
            blocks: self.blocks.iter().map(|b| b.zeros_like()).collect(),
        }
    }

    pub fn forward(&self, input: &Tensor, want_cache: bool) -> (Tensor, Option<ConvStackCache>) {
        let mut stem_out = self.stem.forward(input);
        squash_forward(&mut stem_out);
        let mut block_caches = Vec::new();
        let mut current = stem_out.clone();
        for block in &self.blocks {
            current = block.forward(
                &current,
                if want_cache { Some(&mut block_caches) } else { None },
            );
        }
        let cache = want_cache.then(|| ConvStackCache {
            input: input.clone(),
            stem_out,
            block_caches,
        });
        (current, cache)
    }

    /// Backpropagates to the parameters only; the stack input is an image
    /// and never needs a gradient.
    pub fn backward(&self, cache: &ConvStackCache, grad_out: &Tensor, grad: &mut ConvStack) {
        let mut g = grad_out.clone();
        for idx in (0..self.blocks.len()).rev() {
            g = self.blocks[idx].backward(&cache.block_caches[idx], &g, &mut grad.blocks[idx]);
        }
        squash_backward(&mut g, &cache.stem_out);
        self.stem.backward(&cache.input, &g, &mut grad.stem, false);
    }
}
