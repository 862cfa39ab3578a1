//! The forward model: query encoding from the guidance image, key encoding
//! from the downsampled image fused with canonical features, and local
//! window cross-attention whose values are the unprocessed input features.
//!
//! Output resolution equals the guidance image resolution and the output
//! channel count equals the input channel count, so one weight instance
//! upsamples features of any dimensionality between any two resolutions.

pub(crate) mod attention;
pub(crate) mod layers;

use rand::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::agnostic::{self, KernelBasis};
use crate::error::{Error, Result};
use crate::feature_io::{resize_bilinear, FeatureMap, GuidanceImage};
use crate::tensor::Tensor;
use layers::{Conv2d, ConvStack, ConvStackCache, ProjResBlock, ProjResBlockCache};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpsamplerConfig {
    pub query_dim: usize,
    pub key_dim: usize,
    /// Channel width of the convolution stacks on the image paths.
    pub conv_width: usize,
    pub num_res_blocks: usize,
    /// Window = (2r+1)^2 low-res cells around each query's nearest cell
    /// (clamped at the grid border, so smaller grids degrade gracefully).
    pub window_radius: usize,
    pub pos_enc_frequencies: usize,
    /// Canonical channel count produced by the feature-agnostic layer.
    pub agnostic_m: usize,
    /// Kernel side of the feature-agnostic basis (odd).
    pub agnostic_k: usize,
}

impl Default for UpsamplerConfig {
    fn default() -> Self {
        UpsamplerConfig {
            query_dim: 64,
            key_dim: 64,
            conv_width: 6,
            num_res_blocks: 2,
            window_radius: 1,
            pos_enc_frequencies: 2,
            agnostic_m: 32,
            agnostic_k: 3,
        }
    }
}

impl UpsamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.query_dim != self.key_dim {
            return Err(Error::invalid(format!(
                "query_dim {} must equal key_dim {}",
                self.query_dim, self.key_dim
            )));
        }
        if self.query_dim == 0
            || self.conv_width == 0
            || self.num_res_blocks == 0
            || self.pos_enc_frequencies == 0
            || self.agnostic_m == 0
        {
            return Err(Error::invalid("upsampler dimensions must be positive"));
        }
        if self.agnostic_k == 0 || self.agnostic_k % 2 == 0 {
            return Err(Error::invalid("agnostic kernel side must be odd"));
        }
        Ok(())
    }

    fn pos_channels(&self) -> usize {
        4 * self.pos_enc_frequencies
    }
}

/// All trainable parameters. Values are kept at float32 precision inside
/// f64 storage so checkpoints round-trip bit-exactly.
#[derive(Debug, Clone)]
pub struct UpsamplerWeights {
    pub(crate) basis: KernelBasis,
    pub(crate) query_stack: ConvStack,
    pub(crate) query_proj: Conv2d,
    pub(crate) key_stack: ConvStack,
    pub(crate) fuse: ProjResBlock,
    pub(crate) key_proj: Conv2d,
}

/// Pass-through gain for the positional channels in the query and key
/// projections at init. Matching sinusoidal coordinates make the initial
/// attention logits peak at each query's spatially nearest cell, so the
/// untrained model starts as a soft nearest-neighbor interpolator and
/// training only has to learn guidance-adaptive corrections.
const POS_PRIOR_GAIN: f64 = 1.5;

impl UpsamplerWeights {
    pub fn seeded(config: &UpsamplerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
        let w = config.conv_width;
        let pe = config.pos_channels();
        let mut weights = UpsamplerWeights {
            basis: KernelBasis::seeded(config.agnostic_m, config.agnostic_k, rng.next_u64())?,
            query_stack: ConvStack::seeded(3, 3, w, config.num_res_blocks, &mut rng),
            query_proj: Conv2d::seeded(1, w + pe, config.query_dim, &mut rng),
            key_stack: ConvStack::seeded(3, 3, w, config.num_res_blocks, &mut rng),
            fuse: ProjResBlock::seeded(3, w + pe + config.agnostic_m, w, &mut rng),
            key_proj: Conv2d::seeded(1, w, config.key_dim, &mut rng),
        };

        // spatial-prior initialization: route the pe positional channels of
        // the query path and, via the fusion shortcut, of the key path onto
        // the same leading output dimensions
        let routed = pe.min(w).min(config.query_dim);
        for j in 0..routed {
            weights.query_proj.weight[(w + j) * config.query_dim + j] = POS_PRIOR_GAIN;
            weights.fuse.shortcut.weight[(w + j) * w + j] = 1.0;
            weights.key_proj.weight[j * config.key_dim + j] = POS_PRIOR_GAIN;
        }

        weights.quantize_to_f32();
        Ok(weights)
    }

    pub(crate) fn zeros_like(&self) -> Self {
        UpsamplerWeights {
            basis: KernelBasis::new(
                self.basis.num_filters(),
                self.basis.kernel_size(),
                vec![0.0; self.basis.filters().len()],
            )
            .expect("same shape as a valid basis"),
            query_stack: self.query_stack.zeros_like(),
            query_proj: self.query_proj.zeros_like(),
            key_stack: self.key_stack.zeros_like(),
            fuse: self.fuse.zeros_like(),
            key_proj: self.key_proj.zeros_like(),
        }
    }

    /// Rounds every parameter to its nearest float32 value. Applied after
    /// init and after every optimizer step; checkpoints store float32, so
    /// this keeps save/load an exact identity.
    pub(crate) fn quantize_to_f32(&mut self) {
        self.for_each_param_mut(&mut |_, data| {
            for v in data.iter_mut() {
                *v = *v as f32 as f64;
            }
        });
    }

    /// Visits every named parameter tensor in a fixed traversal order.
    pub fn for_each_param(&self, f: &mut impl FnMut(&str, &[f64])) {
        f("basis.filters", self.basis.filters());
        visit_stack(&self.query_stack, "query_stack", &mut |name, data| f(name, data));
        f("query_proj.weight", &self.query_proj.weight);
        f("query_proj.bias", &self.query_proj.bias);
        visit_stack(&self.key_stack, "key_stack", &mut |name, data| f(name, data));
        f("fuse.conv1.weight", &self.fuse.conv1.weight);
        f("fuse.conv1.bias", &self.fuse.conv1.bias);
        f("fuse.conv2.weight", &self.fuse.conv2.weight);
        f("fuse.conv2.bias", &self.fuse.conv2.bias);
        f("fuse.shortcut.weight", &self.fuse.shortcut.weight);
        f("fuse.shortcut.bias", &self.fuse.shortcut.bias);
        f("key_proj.weight", &self.key_proj.weight);
        f("key_proj.bias", &self.key_proj.bias);
    }

    /// Mutable variant of [`UpsamplerWeights::for_each_param`], same order.
    pub fn for_each_param_mut(&mut self, f: &mut impl FnMut(&str, &mut [f64])) {
        f("basis.filters", self.basis.filters_mut());
        visit_stack_mut(&mut self.query_stack, "query_stack", f);
        f("query_proj.weight", &mut self.query_proj.weight);
        f("query_proj.bias", &mut self.query_proj.bias);
        visit_stack_mut(&mut self.key_stack, "key_stack", f);
        f("fuse.conv1.weight", &mut self.fuse.conv1.weight);
        f("fuse.conv1.bias", &mut self.fuse.conv1.bias);
        f("fuse.conv2.weight", &mut self.fuse.conv2.weight);
        f("fuse.conv2.bias", &mut self.fuse.conv2.bias);
        f("fuse.shortcut.weight", &mut self.fuse.shortcut.weight);
        f("fuse.shortcut.bias", &mut self.fuse.shortcut.bias);
        f("key_proj.weight", &mut self.key_proj.weight);
        f("key_proj.bias", &mut self.key_proj.bias);
    }

    /// Parameter names in traversal order with their lengths.
    pub(crate) fn param_layout(&self) -> Vec<(String, usize)> {
        let mut layout = Vec::new();
        self.for_each_param(&mut |name, data| layout.push((name.to_string(), data.len())));
        layout
    }

    /// Adds `other` (same shape) scaled by `factor` into `self`.
    pub(crate) fn accumulate(&mut self, other: &UpsamplerWeights, factor: f64) {
        let mut flat: Vec<Vec<f64>> = Vec::new();
        other.for_each_param(&mut |_, data| flat.push(data.to_vec()));
        let mut idx = 0;
        self.for_each_param_mut(&mut |_, data| {
            for (a, &b) in data.iter_mut().zip(flat[idx].iter()) {
                *a += factor * b;
            }
            idx += 1;
        });
    }
}

fn visit_stack(stack: &ConvStack, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
    f(&format!("{prefix}.stem.weight"), &stack.stem.weight);
    f(&format!("{prefix}.stem.bias"), &stack.stem.bias);
    for (i, block) in stack.blocks.iter().enumerate() {
        f(&format!("{prefix}.block{i}.conv1.weight"), &block.conv1.weight);
        f(&format!("{prefix}.block{i}.conv1.bias"), &block.conv1.bias);
        f(&format!("{prefix}.block{i}.conv2.weight"), &block.conv2.weight);
        f(&format!("{prefix}.block{i}.conv2.bias"), &block.conv2.bias);
    }
}

fn visit_stack_mut(stack: &mut ConvStack, prefix: &str, f: &mut impl FnMut(&str, &mut [f64])) {
    f(&format!("{prefix}.stem.weight"), &mut stack.stem.weight);
    f(&format!("{prefix}.stem.bias"), &mut stack.stem.bias);
    for (i, block) in stack.blocks.iter_mut().enumerate() {
        f(&format!("{prefix}.block{i}.conv1.weight"), &mut block.conv1.weight);
        f(&format!("{prefix}.block{i}.conv1.bias"), &mut block.conv1.bias);
        f(&format!("{prefix}.block{i}.conv2.weight"), &mut block.conv2.weight);
        f(&format!("{prefix}.block{i}.conv2.bias"), &mut block.conv2.bias);
    }
}

/// Sinusoidal encoding of normalized cell-center coordinates: for each
/// frequency 2^i * pi the channels (sin fx, cos fx, sin fy, cos fy).
pub fn positional_encoding(h: usize, w: usize, frequencies: usize) -> Result<FeatureMap> {
    if h == 0 || w == 0 || frequencies == 0 {
        return Err(Error::invalid("positional encoding needs positive sizes"));
    }
    FeatureMap::from_tensor(&pos_encoding_tensor(h, w, frequencies))
}

pub(crate) fn pos_encoding_tensor(h: usize, w: usize, frequencies: usize) -> Tensor {
    let mut out = Tensor::zeros(h, w, 4 * frequencies);
    for y in 0..h {
        let yn = (y as f64 + 0.5) / h as f64;
        for x in 0..w {
            let xn = (x as f64 + 0.5) / w as f64;
            let px = out.pixel_mut(y, x);
            for i in 0..frequencies {
                let f = 2f64.powi(i as i32) * std::f64::consts::PI;
                px[4 * i] = (f * xn).sin();
                px[4 * i + 1] = (f * xn).cos();
                px[4 * i + 2] = (f * yn).sin();
                px[4 * i + 3] = (f * yn).cos();
            }
        }
    }
    out
}

pub(crate) struct ForwardCache {
    pub features: Tensor,
    q_stack: ConvStackCache,
    q_cat: Tensor,
    queries: Tensor,
    k_stack: ConvStackCache,
    agnostic: agnostic::AgnosticCache,
    fuse_cache: ProjResBlockCache,
    fused: Tensor,
    keys: Tensor,
    attention: attention::AttentionCache,
}

/// A trained or freshly initialized upsampler.
#[derive(Debug, Clone)]
pub struct Upsampler {
    pub config: UpsamplerConfig,
    pub weights: UpsamplerWeights,
}

impl Upsampler {
    pub fn new(config: UpsamplerConfig, seed: u64) -> Result<Self> {
        let weights = UpsamplerWeights::seeded(&config, seed)?;
        Ok(Upsampler { config, weights })
    }

    fn queries_tensor(&self, image: &Tensor, want_cache: bool) -> (Tensor, Option<(ConvStackCache, Tensor)>) {
        let (stack_out, stack_cache) = self.weights.query_stack.forward(image, want_cache);
        let pe = pos_encoding_tensor(image.h, image.w, self.config.pos_enc_frequencies);
        let cat = Tensor::concat_channels(&[&stack_out, &pe]);
        let queries = self.weights.query_proj.forward(&cat);
        (queries, stack_cache.map(|c| (c, cat)))
    }

    fn keys_tensor(
        &self,
        image_lr: &Tensor,
        features: &Tensor,
        want_cache: bool,
    ) -> (
        Tensor,
        Option<(ConvStackCache, agnostic::AgnosticCache, Tensor, ProjResBlockCache, Tensor)>,
    ) {
        let (stack_out, stack_cache) = self.weights.key_stack.forward(image_lr, want_cache);
        let pe = pos_encoding_tensor(image_lr.h, image_lr.w, self.config.pos_enc_frequencies);
        let (agn_out, agn_cache) = agnostic::forward(features, &self.weights.basis, want_cache);
        let cat = Tensor::concat_channels(&[&stack_out, &pe, &agn_out]);
        let mut fuse_cache = None;
        let fused = self.weights.fuse.forward(
            &cat,
            if want_cache { Some(&mut fuse_cache) } else { None },
        );
        let keys = self.weights.key_proj.forward(&fused);
        let cache = want_cache.then(|| {
            (
                stack_cache.expect("requested"),
                agn_cache.expect("requested"),
                cat,
                fuse_cache.expect("requested"),
                fused,
            )
        });
        (keys, cache)
    }

    /// Full forward pass on f64 tensors. `image` is the guidance at the
    /// output resolution, `image_lr` the guidance resized to the feature
    /// grid, `features` the raw low-res features (also the values).
    pub(crate) fn forward_tensor(
        &self,
        image: &Tensor,
        image_lr: &Tensor,
        features: &Tensor,
        want_cache: bool,
    ) -> (Tensor, Option<ForwardCache>) {
        let (queries, q_cache) = self.queries_tensor(image, want_cache);
        let (keys, k_cache) = self.keys_tensor(image_lr, features, want_cache);
        let (out, attn_cache) =
            attention::forward(&queries, &keys, features, self.config.window_radius, want_cache);
        let cache = if want_cache {
            let (q_stack, q_cat) = q_cache.expect("requested");
            let (k_stack, agn, _k_cat, fuse_cache, fused) = k_cache.expect("requested");
            Some(ForwardCache {
                features: features.clone(),
                q_stack,
                q_cat,
                queries,
                k_stack,
                agnostic: agn,
                fuse_cache,
                fused,
                keys,
                attention: attn_cache.expect("requested"),
            })
        } else {
            None
        };
        (out, cache)
    }

    /// Accumulates parameter gradients for one forward pass into `grads`.
    pub(crate) fn backward_tensor(
        &self,
        cache: &ForwardCache,
        grad_out: &Tensor,
        grads: &mut UpsamplerWeights,
    ) {
        let (grad_q, grad_k) = attention::backward(
            &cache.queries,
            &cache.keys,
            &cache.features,
            &cache.attention,
            grad_out,
        );

        // key path
        let grad_fused = self
            .weights
            .key_proj
            .backward(&cache.fused, &grad_k, &mut grads.key_proj, true)
            .expect("input grad requested");
        let grad_k_cat = self
            .weights
            .fuse
            .backward(&cache.fuse_cache, &grad_fused, &mut grads.fuse);
        let parts = grad_k_cat.split_channels(&[
            self.config.conv_width,
            self.config.pos_channels(),
            self.config.agnostic_m,
        ]);
        let grad_basis = agnostic::backward(
            &cache.features,
            &self.weights.basis,
            &cache.agnostic,
            &parts[2],
        );
        for (g, &v) in grads.basis.filters_mut().iter_mut().zip(&grad_basis) {
            *g += v;
        }
        self.weights
            .key_stack
            .backward(&cache.k_stack, &parts[0], &mut grads.key_stack);

        // query path
        let grad_q_cat = self
            .weights
            .query_proj
            .backward(&cache.q_cat, &grad_q, &mut grads.query_proj, true)
            .expect("input grad requested");
        let q_parts = grad_q_cat.split_channels(&[self.config.conv_width, self.config.pos_channels()]);
        self.weights
            .query_stack
            .backward(&cache.q_stack, &q_parts[0], &mut grads.query_stack);
    }

    /// Pixel-level query features from the guidance image.
    pub fn encode_queries(&self, image: &GuidanceImage) -> Result<FeatureMap> {
        let (queries, _) = self.queries_tensor(&image.to_tensor(), false);
        FeatureMap::from_tensor(&queries)
    }

    /// Key features at the low-res grid from the downsampled guidance fused
    /// with the canonicalized input features.
    pub fn encode_keys(&self, image_lr: &GuidanceImage, features: &FeatureMap) -> Result<FeatureMap> {
        if image_lr.height() != features.height() || image_lr.width() != features.width() {
            return Err(Error::shape(format!(
                "downsampled guidance {}x{} must match feature grid {}x{}",
                image_lr.height(),
                image_lr.width(),
                features.height(),
                features.width()
            )));
        }
        let (keys, _) = self.keys_tensor(&image_lr.to_tensor(), &features.to_tensor(), false);
        FeatureMap::from_tensor(&keys)
    }

    /// Upsamples `features` to the resolution of `image`. The output channel
    /// count always equals the input channel count. Windows shrink at the
    /// grid border, so feature grids smaller than the nominal window are
    /// handled by clamping.
    pub fn upsample(&self, image: &GuidanceImage, features: &FeatureMap) -> Result<FeatureMap> {
        let image_lr = resize_bilinear(image, features.height(), features.width())?;
        let (out, _) = self.forward_tensor(
            &image.to_tensor(),
            &image_lr.to_tensor(),
            &features.to_tensor(),
            false,
        );
        FeatureMap::from_tensor(&out)
    }
}

impl Upsampler {
    /// Cosine+MSE loss of `upsample(image, features)` against a fixed
    /// target, together with the analytic gradient of every parameter.
    /// Intended for optimizer integrations and finite-difference checks.
    pub fn loss_and_param_gradients(
        &self,
        image: &GuidanceImage,
        features: &FeatureMap,
        target: &FeatureMap,
    ) -> Result<(f64, Vec<(String, Vec<f64>)>)> {
        if (target.height(), target.width(), target.channels())
            != (image.height(), image.width(), features.channels())
        {
            return Err(Error::shape(
                "target must match the guidance resolution and feature channels",
            ));
        }
        let image_lr = resize_bilinear(image, features.height(), features.width())?;
        let (out, cache) = self.forward_tensor(
            &image.to_tensor(),
            &image_lr.to_tensor(),
            &features.to_tensor(),
            true,
        );
        let (loss, grad_out, _) = crate::losses::cos_mse_grad(&out, &target.to_tensor());
        let mut grads = self.weights.zeros_like();
        self.backward_tensor(&cache.expect("cache requested"), &grad_out, &mut grads);
        let mut flat = Vec::new();
        grads.for_each_param(&mut |name, data| flat.push((name.to_string(), data.to_vec())));
        Ok((loss, flat))
    }
}

/// Local window cross-attention on public containers. Queries and keys must
/// share the channel dimension; keys and values must share the grid.
pub fn window_attention(
    queries: &FeatureMap,
    keys: &FeatureMap,
    values: &FeatureMap,
    window_radius: usize,
) -> Result<FeatureMap> {
    if queries.channels() != keys.channels() {
        return Err(Error::shape(format!(
            "query dim {} does not match key dim {}",
            queries.channels(),
            keys.channels()
        )));
    }
    if keys.height() != values.height() || keys.width() != values.width() {
        return Err(Error::shape(format!(
            "keys {}x{} and values {}x{} must share the grid",
            keys.height(),
            keys.width(),
            values.height(),
            values.width()
        )));
    }
    let (out, _) = attention::forward(
        &queries.to_tensor(),
        &keys.to_tensor(),
        &values.to_tensor(),
        window_radius,
        false,
    );
    FeatureMap::from_tensor(&out)
}
