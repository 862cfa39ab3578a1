//! Crop-based training.
//!
//! Each step samples full images and aligned local crops. The low-res input
//! p comes from the image downsampled to crop resolution; the target comes
//! from encoding the crop directly. Because the encoder is patch-local, the
//! crop's features equal the matching slice of the full image's feature
//! grid exactly, so the model is supervised on the crop window of its
//! upsampled prediction with no approximation error in the geometry.
//!
//! All randomness is derived from (seed, step), which makes a resumed run
//! replay the exact trajectory of an uninterrupted one.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, ToyEncoder};
use crate::error::{Error, Result};
use crate::feature_io::{
    load_image, read_feature_map, resize_bilinear, write_feature_map, FeatureMap, GuidanceImage,
};
use crate::losses::{
    apply_augmentation_with, cos_mse_grad, input_consistency_grad, AugmentConfig, LossBreakdown,
    LossWeights,
};
use crate::rng::mix_seed;
use crate::tensor::Tensor;
use crate::upsampler::{Upsampler, UpsamplerConfig, UpsamplerWeights};

const STREAM_INIT: u64 = 0x11;
const STREAM_BATCH: u64 = 0x22;
const STREAM_AUG: u64 = 0x33;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// A P-aligned square pixel window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropSpec {
    pub offset_y: usize,
    pub offset_x: usize,
    pub size: usize,
}

/// Uniformly samples a patch-aligned crop position.
pub fn sample_crop(
    image_size: usize,
    crop_size: usize,
    patch_size: usize,
    rng: &mut impl Rng,
) -> Result<CropSpec> {
    if crop_size > image_size {
        return Err(Error::invalid(format!(
            "crop size {crop_size} exceeds image size {image_size}"
        )));
    }
    if patch_size == 0 || crop_size == 0 || crop_size % patch_size != 0 || image_size % patch_size != 0
    {
        return Err(Error::invalid(
            "crop and image sizes must be positive multiples of the patch size",
        ));
    }
    let positions = (image_size - crop_size) / patch_size + 1;
    let offset_y = rng.gen_range(0..positions) * patch_size;
    let offset_x = rng.gen_range(0..positions) * patch_size;
    Ok(CropSpec {
        offset_y,
        offset_x,
        size: crop_size,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub crops_per_image: usize,
    pub total_steps: usize,
    pub image_size: usize,
    pub crop_size: usize,
    pub seed: u64,
    pub loss_weights: LossWeights,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub grad_clip: f64,
    /// Steps between periodic checkpoints; 0 disables them.
    pub checkpoint_interval: usize,
    /// Sample a fresh patch-aligned crop size per image each step (from
    /// 2 patches up to image_size - patch); otherwise use `crop_size`.
    /// Mixing scales trains the upsampler across ratios at once.
    pub vary_crop_sizes: bool,
    pub encoder: EncoderConfig,
    pub upsampler: UpsamplerConfig,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 2e-4,
            batch_size: 4,
            crops_per_image: 4,
            total_steps: 2000,
            image_size: 64,
            crop_size: 32,
            seed: 0,
            loss_weights: LossWeights::default(),
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            grad_clip: 1.0,
            checkpoint_interval: 500,
            vary_crop_sizes: true,
            encoder: EncoderConfig::default(),
            upsampler: UpsamplerConfig::default(),
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate < 0.0 {
            return Err(Error::invalid("learning rate must be non-negative"));
        }
        if self.batch_size == 0 || self.crops_per_image == 0 || self.total_steps == 0 {
            return Err(Error::invalid("batch, crops and steps must be positive"));
        }
        let p = self.encoder.patch_size;
        if p == 0 || self.image_size % p != 0 || self.crop_size % p != 0 || self.crop_size == 0 {
            return Err(Error::invalid(
                "image and crop sizes must be positive multiples of the patch size",
            ));
        }
        if self.crop_size >= self.image_size {
            return Err(Error::invalid("crop size must be smaller than the image size"));
        }
        self.loss_weights.validate()?;
        self.upsampler.validate()?;
        Ok(())
    }
}

/// One supervised crop: the source image, its low-res features, the crop
/// pixels, and the exact feature target for the crop window.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub image: GuidanceImage,
    pub features: FeatureMap,
    pub crop_image: GuidanceImage,
    pub target: FeatureMap,
    pub crop: CropSpec,
}

/// Builds the (p, target) pair for one crop. `p` is the encoding of the
/// image downsampled to the crop resolution; the target is the encoding of
/// the crop itself.
pub fn build_training_example(
    image: &GuidanceImage,
    encoder: &ToyEncoder,
    crop: CropSpec,
) -> Result<TrainingExample> {
    validate_crop(image, encoder.config().patch_size, &crop)?;
    let small = resize_bilinear(image, crop.size, crop.size)?;
    let features = encoder.encode(&small)?;
    let crop_image = image.crop(crop.offset_y, crop.offset_x, crop.size, crop.size)?;
    let target = encoder.encode(&crop_image)?;
    Ok(TrainingExample {
        image: image.clone(),
        features,
        crop_image,
        target,
        crop,
    })
}

fn validate_crop(image: &GuidanceImage, patch: usize, crop: &CropSpec) -> Result<()> {
    if crop.size == 0 {
        return Err(Error::invalid("crop size must be positive"));
    }
    if crop.offset_y % patch != 0 || crop.offset_x % patch != 0 || crop.size % patch != 0 {
        return Err(Error::invalid(format!(
            "crop ({}, {}, {}) must be aligned to patch size {patch}",
            crop.offset_y, crop.offset_x, crop.size
        )));
    }
    if crop.offset_y + crop.size > image.height() || crop.offset_x + crop.size > image.width() {
        return Err(Error::invalid("crop exceeds image extent"));
    }
    if image.height() % patch != 0 || image.width() % patch != 0 {
        return Err(Error::invalid(
            "image extent must be a multiple of the patch size",
        ));
    }
    Ok(())
}

/// Shares the encoding of the downsampled image across same-size crops.
pub fn build_examples_for_image(
    image: &GuidanceImage,
    encoder: &ToyEncoder,
    crops: &[CropSpec],
) -> Result<Vec<TrainingExample>> {
    let mut examples = Vec::with_capacity(crops.len());
    let mut shared: Option<(usize, FeatureMap)> = None;
    for &crop in crops {
        validate_crop(image, encoder.config().patch_size, &crop)?;
        let features = match &shared {
            Some((size, f)) if *size == crop.size => f.clone(),
            _ => {
                let small = resize_bilinear(image, crop.size, crop.size)?;
                let f = encoder.encode(&small)?;
                shared = Some((crop.size, f.clone()));
                f
            }
        };
        let crop_image = image.crop(crop.offset_y, crop.offset_x, crop.size, crop.size)?;
        let target = encoder.encode(&crop_image)?;
        examples.push(TrainingExample {
            image: image.clone(),
            features,
            crop_image,
            target,
            crop,
        });
    }
    Ok(examples)
}

/// Feature-grid window covered by a crop: rows and columns
/// `offset / (patch * ratio) .. (offset + size) / (patch * ratio)`.
fn crop_window_cells(
    crop: &CropSpec,
    patch_size: usize,
    downsample_ratio: usize,
) -> Result<(usize, usize, usize, usize)> {
    if patch_size == 0 || downsample_ratio == 0 {
        return Err(Error::invalid("patch size and ratio must be positive"));
    }
    if crop.size == 0 {
        return Err(Error::invalid("crop size must be positive"));
    }
    let unit = patch_size * downsample_ratio;
    if crop.offset_y % unit != 0 || crop.offset_x % unit != 0 || crop.size % unit != 0 {
        return Err(Error::invalid(format!(
            "crop window ({}, {}, {}) is fractional at cell size {unit}",
            crop.offset_y, crop.offset_x, crop.size
        )));
    }
    let r0 = crop.offset_y / unit;
    let c0 = crop.offset_x / unit;
    let cells = crop.size / unit;
    Ok((r0, r0 + cells, c0, c0 + cells))
}

/// Pure-indexing slice of a feature grid over the crop's window.
pub fn extract_crop_features(
    grid: &FeatureMap,
    crop: &CropSpec,
    patch_size: usize,
    downsample_ratio: usize,
) -> Result<FeatureMap> {
    let (r0, r1, c0, c1) = crop_window_cells(crop, patch_size, downsample_ratio)?;
    if r1 > grid.height() || c1 > grid.width() {
        return Err(Error::shape(format!(
            "crop window rows {r0}..{r1} cols {c0}..{c1} exceed grid {}x{}",
            grid.height(),
            grid.width()
        )));
    }
    let c = grid.channels();
    let mut data = Vec::with_capacity((r1 - r0) * (c1 - c0) * c);
    for y in r0..r1 {
        for x in c0..c1 {
            data.extend_from_slice(grid.pixel(y, x));
        }
    }
    FeatureMap::new(r1 - r0, c1 - c0, c, data)
}

fn slice_window(t: &Tensor, r0: usize, r1: usize, c0: usize, c1: usize) -> Tensor {
    let mut out = Tensor::zeros(r1 - r0, c1 - c0, t.c);
    for y in r0..r1 {
        for x in c0..c1 {
            out.pixel_mut(y - r0, x - c0).copy_from_slice(t.pixel(y, x));
        }
    }
    out
}

fn add_window_scaled(dst: &mut Tensor, src: &Tensor, r0: usize, c0: usize, scale: f64) {
    for y in 0..src.h {
        for x in 0..src.w {
            for (d, &s) in dst.pixel_mut(r0 + y, c0 + x).iter_mut().zip(src.pixel(y, x)) {
                *d += scale * s;
            }
        }
    }
}

/// Adaptive-moment optimizer state with decoupled weight decay, aligned to
/// the weight traversal order.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(weights: &UpsamplerWeights) -> Self {
        let mut m = Vec::new();
        weights.for_each_param(&mut |_, data| m.push(vec![0.0; data.len()]));
        AdamState {
            v: m.clone(),
            m,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

fn global_grad_norm(grads: &UpsamplerWeights) -> f64 {
    let mut sum = 0.0;
    grads.for_each_param(&mut |_, data| {
        for &g in data {
            sum += g * g;
        }
    });
    sum.sqrt()
}

fn adam_update(
    weights: &mut UpsamplerWeights,
    grads: &UpsamplerWeights,
    state: &mut AdamState,
    config: &TrainConfig,
) {
    let mut flat: Vec<Vec<f64>> = Vec::new();
    grads.for_each_param(&mut |_, data| flat.push(data.to_vec()));
    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - config.beta1.powi(t);
    let bias2 = 1.0 - config.beta2.powi(t);
    let mut idx = 0;
    weights.for_each_param_mut(&mut |_, data| {
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        let g = &flat[idx];
        for i in 0..data.len() {
            m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g[i];
            v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g[i] * g[i];
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            data[i] -= config.learning_rate
                * (m_hat / (v_hat.sqrt() + config.epsilon) + config.weight_decay * data[i]);
            // float32-valued state keeps checkpoint round-trips exact
            m[i] = m[i] as f32 as f64;
            v[i] = v[i] as f32 as f64;
            data[i] = data[i] as f32 as f64;
        }
        idx += 1;
    });
}

struct GroupOutcome {
    grads: UpsamplerWeights,
    main_sum: f64,
    input_term: f64,
    self_term: f64,
}

fn run_group(
    upsampler: &Upsampler,
    examples: &[TrainingExample],
    config: &TrainConfig,
    aug_seed: u64,
    main_coef: f64,
    input_coef: f64,
    self_coef: f64,
) -> Result<GroupOutcome> {
    let image = &examples[0].image;
    let features = &examples[0].features;
    let patch = config.encoder.patch_size;
    let grid_h = image.height() / patch;
    let grid_w = image.width() / patch;

    let p_t = features.to_tensor();
    let mut grads = upsampler.weights.zeros_like();

    // prediction at the full image's feature grid, supervised on crop windows
    let guide = resize_bilinear(image, grid_h, grid_w)?;
    let guide_lr = resize_bilinear(&guide, features.height(), features.width())?;
    let (q_full, main_cache) =
        upsampler.forward_tensor(&guide.to_tensor(), &guide_lr.to_tensor(), &p_t, true);
    let main_cache = main_cache.expect("cache requested");

    let mut grad_q = Tensor::zeros(q_full.h, q_full.w, q_full.c);
    let mut main_sum = 0.0;
    for ex in examples {
        let (r0, r1, c0, c1) = crop_window_cells(&ex.crop, patch, 1)?;
        if r1 > q_full.h || c1 > q_full.w {
            return Err(Error::shape("crop window exceeds prediction grid"));
        }
        let predicted = slice_window(&q_full, r0, r1, c0, c1);
        let target = ex.target.to_tensor();
        if (predicted.h, predicted.w, predicted.c) != (target.h, target.w, target.c) {
            return Err(Error::shape("crop target shape mismatch"));
        }
        let (value, grad_pred, _) = cos_mse_grad(&predicted, &target);
        main_sum += value;
        add_window_scaled(&mut grad_q, &grad_pred, r0, c0, main_coef);
    }

    let (input_term, grad_input) = input_consistency_grad(&q_full, &p_t);
    if input_coef != 0.0 {
        for (g, &v) in grad_q.data.iter_mut().zip(&grad_input.data) {
            *g += input_coef * v;
        }
    }
    upsampler.backward_tensor(&main_cache, &grad_q, &mut grads);

    // consistency between clean and augmented guidance at image resolution
    let mut self_term = 0.0;
    if self_coef != 0.0 {
        let augmented = apply_augmentation_with(image, &config.augment, aug_seed);
        let clean_lr = resize_bilinear(image, features.height(), features.width())?;
        let aug_lr = resize_bilinear(&augmented, features.height(), features.width())?;
        let (clean_out, clean_cache) =
            upsampler.forward_tensor(&image.to_tensor(), &clean_lr.to_tensor(), &p_t, true);
        let (aug_out, aug_cache) =
            upsampler.forward_tensor(&augmented.to_tensor(), &aug_lr.to_tensor(), &p_t, true);
        let (value, mut grad_clean, mut grad_aug) = cos_mse_grad(&clean_out, &aug_out);
        self_term = value;
        for g in grad_clean.data.iter_mut() {
            *g *= self_coef;
        }
        for g in grad_aug.data.iter_mut() {
            *g *= self_coef;
        }
        upsampler.backward_tensor(&clean_cache.expect("cache requested"), &grad_clean, &mut grads);
        upsampler.backward_tensor(&aug_cache.expect("cache requested"), &grad_aug, &mut grads);
    }

    Ok(GroupOutcome {
        grads,
        main_sum,
        input_term,
        self_term,
    })
}

/// One optimizer step over a batch of examples. Consecutive examples that
/// share an image form one group: the main term averages over examples, the
/// consistency terms over groups, and the self term is skipped (reported as
/// zero) when its weight is zero. Deterministic given weights, batch,
/// optimizer state, seed and step.
pub fn train_step(
    upsampler: &mut Upsampler,
    batch: &[TrainingExample],
    opt: &mut AdamState,
    config: &TrainConfig,
    step: u64,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mut groups: Vec<(usize, usize)> = Vec::new();
    let mut start = 0;
    for i in 1..=batch.len() {
        if i == batch.len()
            || batch[i].image != batch[start].image
            || batch[i].features != batch[start].features
        {
            groups.push((start, i));
            start = i;
        }
    }

    let w = &config.loss_weights;
    let n_examples = batch.len() as f64;
    let n_groups = groups.len() as f64;
    let main_coef = w.main / n_examples;
    let input_coef = w.input / n_groups;
    let self_coef = w.self_consistency / n_groups;
    let aug_base = mix_seed(mix_seed(config.seed, STREAM_AUG), step);

    let shared: &Upsampler = upsampler;
    let outcomes: Result<Vec<GroupOutcome>> = groups
        .par_iter()
        .enumerate()
        .map(|(gi, &(lo, hi))| {
            run_group(
                shared,
                &batch[lo..hi],
                config,
                mix_seed(aug_base, gi as u64),
                main_coef,
                input_coef,
                self_coef,
            )
        })
        .collect();
    let outcomes = outcomes?;

    let mut grads = upsampler.weights.zeros_like();
    let mut main = 0.0;
    let mut input = 0.0;
    let mut self_c = 0.0;
    for o in &outcomes {
        grads.accumulate(&o.grads, 1.0);
        main += o.main_sum;
        input += o.input_term;
        self_c += o.self_term;
    }
    main /= n_examples;
    input /= n_groups;
    self_c /= n_groups;
    let total = w.main * main + w.input * input + w.self_consistency * self_c;

    if !total.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss at step {step}: main {main}, input {input}, self {self_c}"
        )));
    }

    if config.grad_clip > 0.0 {
        let norm = global_grad_norm(&grads);
        if norm > config.grad_clip {
            let scale = config.grad_clip / norm;
            grads.for_each_param_mut(&mut |_, data| {
                for g in data.iter_mut() {
                    *g *= scale;
                }
            });
        }
    }
    adam_update(&mut upsampler.weights, &grads, opt, config);

    Ok(LossBreakdown {
        main,
        input,
        self_consistency: self_c,
        total,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogRow {
    pub step: u64,
    pub loss_main: f64,
    pub loss_input: f64,
    pub loss_self: f64,
    pub loss_total: f64,
    pub wall_ms: f64,
}

/// Serializes the training log; one row per optimizer step.
pub fn write_log_csv(rows: &[TrainLogRow], path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::from("step,loss_main,loss_input,loss_self,loss_total,wall_ms\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.17e},{:.17e},{:.17e},{:.17e},{:.3}\n",
            r.step, r.loss_main, r.loss_input, r.loss_self, r.loss_total, r.wall_ms
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// State restored from a checkpoint to continue training.
pub struct ResumeState {
    pub upsampler: Upsampler,
    pub optimizer: AdamState,
    pub step: u64,
}

/// Trains on pre-loaded images. When `out_dir` is set, periodic checkpoints
/// land in `out_dir/step_NNNNNN/`, and the final checkpoint plus the CSV log
/// are written into `out_dir` itself.
pub fn train_on_images(
    config: &TrainConfig,
    images: &[GuidanceImage],
    out_dir: Option<&Path>,
    resume: Option<ResumeState>,
) -> Result<(Upsampler, Vec<TrainLogRow>)> {
    config.validate()?;
    if images.is_empty() {
        return Err(Error::invalid("training dataset is empty"));
    }
    for img in images {
        if img.height() != config.image_size || img.width() != config.image_size {
            return Err(Error::shape(format!(
                "training image {}x{} does not match configured size {}",
                img.height(),
                img.width(),
                config.image_size
            )));
        }
    }
    let encoder = ToyEncoder::new(config.encoder)?;
    let (mut upsampler, mut opt, start_step) = match resume {
        Some(r) => (r.upsampler, r.optimizer, r.step),
        None => {
            let up = Upsampler::new(
                config.upsampler,
                mix_seed(mix_seed(config.seed, STREAM_INIT), 0),
            )?;
            let opt = AdamState::new(&up.weights);
            (up, opt, 0)
        }
    };

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }

    let mut log = Vec::new();
    for step in start_step..config.total_steps as u64 {
        let begin = Instant::now();
        let mut rng = rand::rngs::StdRng::seed_from_u64(mix_seed(
            mix_seed(config.seed, STREAM_BATCH),
            step,
        ));
        let mut batch = Vec::new();
        for _ in 0..config.batch_size {
            let idx = rng.gen_range(0..images.len());
            let crop_size = if config.vary_crop_sizes {
                let p = config.encoder.patch_size;
                let smallest = 2 * p;
                let largest = config.image_size - p;
                let options = (largest - smallest) / p + 1;
                smallest + rng.gen_range(0..options) * p
            } else {
                config.crop_size
            };
            let crops: Result<Vec<CropSpec>> = (0..config.crops_per_image)
                .map(|_| {
                    sample_crop(config.image_size, crop_size, config.encoder.patch_size, &mut rng)
                })
                .collect();
            batch.extend(build_examples_for_image(&images[idx], &encoder, &crops?)?);
        }

        let breakdown = train_step(&mut upsampler, &batch, &mut opt, config, step)?;
        log.push(TrainLogRow {
            step,
            loss_main: breakdown.main,
            loss_input: breakdown.input,
            loss_self: breakdown.self_consistency,
            loss_total: breakdown.total,
            wall_ms: begin.elapsed().as_secs_f64() * 1e3,
        });

        if let Some(dir) = out_dir {
            let done = step + 1;
            if config.checkpoint_interval > 0
                && done % config.checkpoint_interval as u64 == 0
                && done < config.total_steps as u64
            {
                save_checkpoint(
                    &upsampler,
                    &opt,
                    done,
                    config,
                    &dir.join(format!("step_{done:06}")),
                )?;
            }
        }
    }

    if let Some(dir) = out_dir {
        save_checkpoint(&upsampler, &opt, config.total_steps as u64, config, dir)?;
        write_log_csv(&log, dir.join("train_log.csv"))?;
    }
    Ok((upsampler, log))
}

/// Loads a dataset from image paths (resizing to the configured size when
/// needed), skipping unreadable files with a warning.
pub fn load_dataset(config: &TrainConfig, paths: &[PathBuf]) -> Result<Vec<GuidanceImage>> {
    let mut images = Vec::new();
    for path in paths {
        match load_image(path) {
            Ok(img) => {
                let img = if img.height() != config.image_size || img.width() != config.image_size
                {
                    resize_bilinear(&img, config.image_size, config.image_size)?
                } else {
                    img
                };
                images.push(img);
            }
            Err(e) => eprintln!("warning: skipping unreadable image {}: {e}", path.display()),
        }
    }
    if images.is_empty() {
        return Err(Error::invalid("no readable images in dataset"));
    }
    Ok(images)
}

/// Full pipeline from image paths.
pub fn train(
    config: &TrainConfig,
    dataset: &[PathBuf],
    out_dir: Option<&Path>,
) -> Result<(Upsampler, Vec<TrainLogRow>)> {
    let images = load_dataset(config, dataset)?;
    train_on_images(config, &images, out_dir, None)
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    step: u64,
    train_config: TrainConfig,
    upsampler_config: UpsamplerConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    len: usize,
    file: String,
}

fn write_param_tensor(dir: &Path, name: &str, data: &[f64]) -> Result<TensorEntry> {
    let file = format!("tensors/{name}.anyt");
    let map = FeatureMap::new(1, 1, data.len(), data.iter().map(|&v| v as f32).collect())?;
    write_feature_map(&map, dir.join(&file))?;
    Ok(TensorEntry {
        name: name.to_string(),
        len: data.len(),
        file,
    })
}

/// Writes weights, optimizer state and the config echo into a checkpoint
/// directory: one ANYT file per named tensor plus `manifest.json`.
pub fn save_checkpoint(
    upsampler: &Upsampler,
    opt: &AdamState,
    step: u64,
    train_config: &TrainConfig,
    dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(dir.join("tensors"))?;
    let mut tensors = Vec::new();
    let mut failure = None;
    upsampler.weights.for_each_param(&mut |name, data| {
        if failure.is_none() {
            match write_param_tensor(dir, name, data) {
                Ok(entry) => tensors.push(entry),
                Err(e) => failure = Some(e),
            }
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    let layout = upsampler.weights.param_layout();
    for (idx, (name, _)) in layout.iter().enumerate() {
        tensors.push(write_param_tensor(dir, &format!("opt_m.{name}"), &opt.m[idx])?);
        tensors.push(write_param_tensor(dir, &format!("opt_v.{name}"), &opt.v[idx])?);
    }
    let manifest = Manifest {
        format_version: CHECKPOINT_FORMAT_VERSION,
        step,
        train_config: *train_config,
        upsampler_config: upsampler.config,
        tensors,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::format(format!("manifest serialization failed: {e}")))?;
    std::fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

/// A restored checkpoint.
pub struct Checkpoint {
    pub upsampler: Upsampler,
    pub optimizer: AdamState,
    pub step: u64,
    pub train_config: TrainConfig,
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest_text = std::fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: Manifest = serde_json::from_str(&manifest_text)
        .map_err(|e| Error::format(format!("manifest parse failed: {e}")))?;
    if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::format(format!(
            "checkpoint format version {} not supported (expected {CHECKPOINT_FORMAT_VERSION})",
            manifest.format_version
        )));
    }

    let mut by_name = std::collections::HashMap::new();
    for entry in &manifest.tensors {
        by_name.insert(entry.name.clone(), entry);
    }
    let read_tensor = |name: &str, expect_len: usize| -> Result<Vec<f64>> {
        let entry = by_name
            .get(name)
            .ok_or_else(|| Error::invalid(format!("checkpoint is missing tensor {name}")))?;
        let map = read_feature_map(dir.join(&entry.file))?;
        if map.data().len() != expect_len {
            return Err(Error::invalid(format!(
                "tensor {name} has length {}, expected {expect_len}",
                map.data().len()
            )));
        }
        Ok(map.data().iter().map(|&v| v as f64).collect())
    };

    let mut upsampler = Upsampler::new(manifest.upsampler_config, 0)?;
    let layout = upsampler.weights.param_layout();
    let mut loaded = Vec::with_capacity(layout.len());
    for (name, len) in &layout {
        loaded.push(read_tensor(name, *len)?);
    }
    let mut idx = 0;
    upsampler.weights.for_each_param_mut(&mut |_, data| {
        data.copy_from_slice(&loaded[idx]);
        idx += 1;
    });

    let mut optimizer = AdamState::new(&upsampler.weights);
    for (idx, (name, len)) in layout.iter().enumerate() {
        optimizer.m[idx] = read_tensor(&format!("opt_m.{name}"), *len)?;
        optimizer.v[idx] = read_tensor(&format!("opt_v.{name}"), *len)?;
    }
    optimizer.step = manifest.step;

    Ok(Checkpoint {
        upsampler,
        optimizer,
        step: manifest.step,
        train_config: manifest.train_config,
    })
}

#[cfg(test)]
mod tests;
