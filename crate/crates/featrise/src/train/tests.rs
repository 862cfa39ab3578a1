use super::*;
use crate::synthetic::generate_image;
use rand::SeedableRng;

fn quick_config() -> TrainConfig {
    TrainConfig {
        image_size: 32,
        crop_size: 16,
        total_steps: 4,
        checkpoint_interval: 0,
        upsampler: UpsamplerConfig {
            query_dim: 8,
            key_dim: 8,
            conv_width: 4,
            num_res_blocks: 1,
            window_radius: 1,
            pos_enc_frequencies: 1,
            agnostic_m: 4,
            agnostic_k: 3,
        },
        encoder: EncoderConfig {
            patch_size: 4,
            feature_dim: 6,
            hidden_dim: 12,
            seed: 0,
        },
        ..TrainConfig::default()
    }
}

#[test]
fn crop_sampling_is_uniform_over_aligned_positions() {
    let mut rng = rand::rngs::StdRng::seed_from_u64(1);
    // image 64, crop 32, patch 8: offsets in {0, 8, 16, 24, 32} per axis
    let positions = 5;
    let mut counts = vec![0usize; positions * positions];
    let draws = 10_000;
    for _ in 0..draws {
        let c = sample_crop(64, 32, 8, &mut rng).unwrap();
        assert!(c.offset_y % 8 == 0 && c.offset_x % 8 == 0);
        assert!(c.offset_y + c.size <= 64 && c.offset_x + c.size <= 64);
        counts[(c.offset_y / 8) * positions + c.offset_x / 8] += 1;
    }
    let expected = draws as f64 / counts.len() as f64;
    let chi2: f64 = counts
        .iter()
        .map(|&o| (o as f64 - expected).powi(2) / expected)
        .sum();
    // df = 24, upper 1% critical value ~= 42.98
    assert!(chi2 < 42.98, "chi-square {chi2} too large for uniformity");
}

#[test]
fn crop_sampling_boundary_cases() {
    let mut rng = rand::rngs::StdRng::seed_from_u64(2);
    // crop = image - patch: offsets in {0, patch}
    for _ in 0..50 {
        let c = sample_crop(32, 24, 8, &mut rng).unwrap();
        assert!(c.offset_y == 0 || c.offset_y == 8);
        assert!(c.offset_x == 0 || c.offset_x == 8);
    }
    // crop = image: the single spec (0, 0)
    for _ in 0..10 {
        let c = sample_crop(32, 32, 8, &mut rng).unwrap();
        assert_eq!((c.offset_y, c.offset_x), (0, 0));
    }
    assert!(sample_crop(32, 40, 8, &mut rng).is_err());
    assert!(sample_crop(32, 12, 8, &mut rng).is_err());
}

#[test]
fn example_geometry_matches_the_grid_convention() {
    let cfg = quick_config();
    let encoder = ToyEncoder::new(EncoderConfig::default()).unwrap();
    let image = generate_image(64, 3);
    let crop = CropSpec {
        offset_y: 16,
        offset_x: 24,
        size: 32,
    };
    let ex = build_training_example(&image, &encoder, crop).unwrap();
    assert_eq!((ex.features.height(), ex.features.width()), (4, 4));
    assert_eq!((ex.target.height(), ex.target.width()), (4, 4));
    assert_eq!(ex.crop_image.height(), 32);
    let _ = cfg;
    // window on the 8x8 full-image grid
    let (r0, r1, c0, c1) = crop_window_cells(&crop, 8, 1).unwrap();
    assert_eq!((r0, r1, c0, c1), (2, 6, 3, 7));
}

#[test]
fn misaligned_crop_is_rejected() {
    let encoder = ToyEncoder::new(EncoderConfig::default()).unwrap();
    let image = generate_image(64, 4);
    let crop = CropSpec {
        offset_y: 4,
        offset_x: 0,
        size: 32,
    };
    assert!(build_training_example(&image, &encoder, crop).is_err());
}

#[test]
fn extract_full_grid_is_identity() {
    let grid = FeatureMap::new(4, 4, 2, (0..32).map(|v| v as f32).collect()).unwrap();
    let crop = CropSpec {
        offset_y: 0,
        offset_x: 0,
        size: 32,
    };
    let out = extract_crop_features(&grid, &crop, 8, 1).unwrap();
    assert_eq!(out, grid);
}

#[test]
fn extract_window_index_arithmetic() {
    let grid = FeatureMap::new(8, 8, 1, (0..64).map(|v| v as f32).collect()).unwrap();
    let crop = CropSpec {
        offset_y: 16,
        offset_x: 24,
        size: 32,
    };
    let out = extract_crop_features(&grid, &crop, 8, 1).unwrap();
    assert_eq!((out.height(), out.width()), (4, 4));
    // rows [2, 6), cols [3, 7)
    for y in 0..4 {
        for x in 0..4 {
            assert_eq!(out.at(y, x, 0), grid.at(2 + y, 3 + x, 0));
        }
    }
}

#[test]
fn fractional_and_empty_windows_are_rejected() {
    let grid = FeatureMap::new(8, 8, 1, vec![0.0; 64]).unwrap();
    let fractional = CropSpec {
        offset_y: 4,
        offset_x: 0,
        size: 32,
    };
    assert!(extract_crop_features(&grid, &fractional, 8, 1).is_err());
    let empty = CropSpec {
        offset_y: 0,
        offset_x: 0,
        size: 0,
    };
    assert!(extract_crop_features(&grid, &empty, 8, 1).is_err());
}

/// The geometry oracle: with the patch-local encoder, the crop's features
/// equal the matching slice of the full image's feature grid bit-exactly.
#[test]
fn crop_targets_equal_dense_grid_slices() {
    let encoder = ToyEncoder::new(EncoderConfig::default()).unwrap();
    let image = generate_image(64, 11);
    let full_grid = encoder.encode(&image).unwrap();
    let mut rng = rand::rngs::StdRng::seed_from_u64(12);
    for _ in 0..10 {
        let crop = sample_crop(64, 32, 8, &mut rng).unwrap();
        let ex = build_training_example(&image, &encoder, crop).unwrap();
        let slice = extract_crop_features(&full_grid, &crop, 8, 1).unwrap();
        assert_eq!(slice, ex.target);
    }
}

fn tiny_batch(config: &TrainConfig, seed: u64) -> Vec<TrainingExample> {
    let encoder = ToyEncoder::new(config.encoder).unwrap();
    let image = generate_image(config.image_size, seed);
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    let crops: Vec<CropSpec> = (0..2)
        .map(|_| sample_crop(config.image_size, config.crop_size, config.encoder.patch_size, &mut rng).unwrap())
        .collect();
    build_examples_for_image(&image, &encoder, &crops).unwrap()
}

#[test]
fn zero_learning_rate_leaves_weights_bit_exact() {
    let mut config = quick_config();
    config.learning_rate = 0.0;
    let batch = tiny_batch(&config, 7);
    let mut up = Upsampler::new(config.upsampler, 1).unwrap();
    let mut opt = AdamState::new(&up.weights);
    let mut before = Vec::new();
    up.weights.for_each_param(&mut |_, d| before.push(d.to_vec()));
    let breakdown = train_step(&mut up, &batch, &mut opt, &config, 0).unwrap();
    assert!(breakdown.total.is_finite() && breakdown.main > 0.0);
    let mut idx = 0;
    up.weights.for_each_param(&mut |name, d| {
        assert_eq!(d, &before[idx][..], "{name} changed");
        idx += 1;
    });
}

#[test]
fn same_seed_runs_produce_identical_logs() {
    let config = quick_config();
    let images: Vec<GuidanceImage> = (0..3).map(|i| generate_image(32, 100 + i)).collect();
    let (up_a, log_a) = train_on_images(&config, &images, None, None).unwrap();
    let (up_b, log_b) = train_on_images(&config, &images, None, None).unwrap();
    assert_eq!(log_a.len(), 4);
    for (a, b) in log_a.iter().zip(&log_b) {
        assert_eq!(a.step, b.step);
        assert_eq!(a.loss_main.to_bits(), b.loss_main.to_bits());
        assert_eq!(a.loss_total.to_bits(), b.loss_total.to_bits());
    }
    let mut pa = Vec::new();
    up_a.weights.for_each_param(&mut |_, d| pa.push(d.to_vec()));
    let mut idx = 0;
    up_b.weights.for_each_param(&mut |_, d| {
        assert_eq!(d, &pa[idx][..]);
        idx += 1;
    });
}

#[test]
fn resume_replays_the_uninterrupted_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = quick_config();
    config.total_steps = 6;
    config.checkpoint_interval = 3;
    let images: Vec<GuidanceImage> = (0..2).map(|i| generate_image(32, 200 + i)).collect();

    let (_, full_log) = train_on_images(&config, &images, Some(dir.path()), None).unwrap();

    let ckpt = load_checkpoint(&dir.path().join("step_000003")).unwrap();
    assert_eq!(ckpt.step, 3);
    let resume = ResumeState {
        upsampler: ckpt.upsampler,
        optimizer: ckpt.optimizer,
        step: ckpt.step,
    };
    let (_, tail_log) = train_on_images(&config, &images, None, Some(resume)).unwrap();
    assert_eq!(tail_log.len(), 3);
    for (cont, full) in tail_log.iter().zip(&full_log[3..]) {
        assert_eq!(cont.step, full.step);
        assert_eq!(cont.loss_main.to_bits(), full.loss_main.to_bits());
        assert_eq!(cont.loss_total.to_bits(), full.loss_total.to_bits());
    }
}

#[test]
fn checkpoint_roundtrip_is_byte_identical_and_forward_exact() {
    let dir = tempfile::tempdir().unwrap();
    let config = quick_config();
    let up = Upsampler::new(config.upsampler, 42).unwrap();
    let opt = AdamState::new(&up.weights);

    let first = dir.path().join("a");
    save_checkpoint(&up, &opt, 0, &config, &first).unwrap();
    let ckpt = load_checkpoint(&first).unwrap();
    let second = dir.path().join("b");
    save_checkpoint(&ckpt.upsampler, &ckpt.optimizer, 0, &config, &second).unwrap();

    let walk = |root: &Path| -> Vec<(String, Vec<u8>)> {
        let mut files = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(p) = stack.pop() {
            for entry in std::fs::read_dir(&p).unwrap() {
                let e = entry.unwrap();
                if e.path().is_dir() {
                    stack.push(e.path());
                } else {
                    let rel = e.path().strip_prefix(root).unwrap().display().to_string();
                    files.push((rel, std::fs::read(e.path()).unwrap()));
                }
            }
        }
        files.sort();
        files
    };
    assert_eq!(walk(&first), walk(&second));

    // forward pass identical before save vs after load
    let image = generate_image(32, 5);
    let p = ToyEncoder::new(config.encoder)
        .unwrap()
        .encode(&resize_bilinear(&image, 16, 16).unwrap())
        .unwrap();
    let a = up.upsample(&image, &p).unwrap();
    let b = ckpt.upsampler.upsample(&image, &p).unwrap();
    assert_eq!(a, b);
}

#[test]
fn truncated_checkpoint_tensor_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = quick_config();
    let up = Upsampler::new(config.upsampler, 1).unwrap();
    let opt = AdamState::new(&up.weights);
    save_checkpoint(&up, &opt, 0, &config, dir.path()).unwrap();
    let victim = dir.path().join("tensors/basis.filters.anyt");
    let bytes = std::fs::read(&victim).unwrap();
    std::fs::write(&victim, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(load_checkpoint(dir.path()), Err(Error::Io(_))));
}

#[test]
fn version_mismatch_is_explicit_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = quick_config();
    let up = Upsampler::new(config.upsampler, 1).unwrap();
    let opt = AdamState::new(&up.weights);
    save_checkpoint(&up, &opt, 0, &config, dir.path()).unwrap();
    let manifest_path = dir.path().join("manifest.json");
    let text = std::fs::read_to_string(&manifest_path)
        .unwrap()
        .replace("\"format_version\": 1", "\"format_version\": 9");
    std::fs::write(&manifest_path, text).unwrap();
    match load_checkpoint(dir.path()) {
        Err(Error::Format(msg)) => assert!(msg.contains("version")),
        Err(other) => panic!("expected version error, got {other:?}"),
        Ok(_) => panic!("expected version error, got a checkpoint"),
    }
}

#[test]
fn empty_dataset_is_an_error() {
    let config = quick_config();
    assert!(train_on_images(&config, &[], None, None).is_err());
    assert!(train(&config, &[], None).is_err());
}

#[test]
fn single_step_run_writes_log_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = quick_config();
    config.total_steps = 1;
    let images = vec![generate_image(32, 9)];
    let (_, log) = train_on_images(&config, &images, Some(dir.path()), None).unwrap();
    assert_eq!(log.len(), 1);
    assert!(dir.path().join("manifest.json").exists());
    assert!(dir.path().join("train_log.csv").exists());
}

/// Overfitting one fixed example: the main loss must fall hard and settle;
/// windowed means over 50 steps decrease monotonically.
#[test]
fn single_example_overfit_collapses_the_loss() {
    let mut config = quick_config();
    config.image_size = 64;
    config.crop_size = 32;
    config.encoder = EncoderConfig::default();
    config.upsampler = UpsamplerConfig::default();
    config.loss_weights = LossWeights::new(1.0, 0.0, 0.0).unwrap();

    let encoder = ToyEncoder::new(config.encoder).unwrap();
    let image = generate_image(64, 40);
    let crop = CropSpec {
        offset_y: 32,
        offset_x: 32,
        size: 32,
    };
    let batch = vec![build_training_example(&image, &encoder, crop).unwrap()];

    let mut up = Upsampler::new(config.upsampler, 3).unwrap();
    let mut opt = AdamState::new(&up.weights);
    let mut losses = Vec::new();
    for step in 0..500u64 {
        let b = train_step(&mut up, &batch, &mut opt, &config, step).unwrap();
        losses.push(b.main);
    }

    let windows: Vec<f64> = losses
        .chunks(50)
        .map(|w| w.iter().sum::<f64>() / w.len() as f64)
        .collect();
    for pair in windows.windows(2) {
        assert!(
            pair[1] < pair[0],
            "window means must decrease: {windows:?}"
        );
    }
    assert!(
        losses[499] < 0.1 * losses[0],
        "final loss {} not below 10% of initial {}",
        losses[499],
        losses[0]
    );
}
