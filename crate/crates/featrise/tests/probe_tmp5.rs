use featrise::encoder::{EncoderConfig, ToyEncoder};
use featrise::losses::LossWeights;
use featrise::GuidanceImage;
use featrise::train::*;
use featrise::upsampler::Upsampler;
use rand::{Rng, SeedableRng};

fn mosaic_image(size: usize, seed: u64) -> GuidanceImage {
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    let block = size / 4;
    let palette: Vec<[f32; 3]> = (0..rng.gen_range(3..=5)).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
    let mut data = vec![0.0f32; size * size * 3];
    let blocks = size / block;
    let mut assign = vec![0usize; blocks * blocks];
    for a in assign.iter_mut() { *a = rng.gen_range(0..palette.len()); }
    for y in 0..size {
        for x in 0..size {
            let b = (y / block) * blocks + (x / block);
            let c = palette[assign[b]];
            for ch in 0..3 { data[(y * size + x) * 3 + ch] = c[ch]; }
        }
    }
    // solid polygons
    for _ in 0..rng.gen_range(2..=4) {
        let color: [f32; 3] = [rng.gen(), rng.gen(), rng.gen()];
        let cy: f64 = rng.gen_range(size as f64 * 0.2..size as f64 * 0.8);
        let cx: f64 = rng.gen_range(size as f64 * 0.2..size as f64 * 0.8);
        let radius: f64 = rng.gen_range(size as f64 / 4.5..size as f64 / 2.4);
        let sides = rng.gen_range(3..=6);
        let mut angles: Vec<f64> = (0..sides).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
        angles.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let verts: Vec<(f64, f64)> = angles.iter().map(|&a| {
            let r = radius * rng.gen_range(0.7..1.0);
            (cy + r * a.sin(), cx + r * a.cos())
        }).collect();
        for y in 0..size {
            for x in 0..size {
                let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
                let mut inside = false;
                let n = verts.len();
                let mut j = n - 1;
                for i in 0..n {
                    let (yi, xi) = verts[i];
                    let (yj, xj) = verts[j];
                    if (yi > py) != (yj > py) {
                        let xc = xi + (py - yi) / (yj - yi) * (xj - xi);
                        if px < xc { inside = !inside; }
                    }
                    j = i;
                }
                if inside { for ch in 0..3 { data[(y * size + x) * 3 + ch] = color[ch]; } }
            }
        }
    }
    // gentle lighting ramp +-12%
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (dy, dx) = angle.sin_cos();
    for y in 0..size {
        for x in 0..size {
            let t = (y as f64 * dy + x as f64 * dx) / (size as f64 * 1.42);
            let shade = (1.0 + 0.24 * t) as f32;
            for ch in 0..3 {
                let v = &mut data[(y * size + x) * 3 + ch];
                *v = (*v * shade).clamp(0.0, 1.0);
            }
        }
    }
    GuidanceImage::new(size, size, data).unwrap()
}

#[test]
#[ignore]
fn probe_mosaic_overfit() {
    for seed in [21u64, 5, 9, 33] {
        let mut config = TrainConfig::default();
        config.loss_weights = LossWeights::new(1.0, 0.0, 0.0).unwrap();
        let encoder = ToyEncoder::new(EncoderConfig::default()).unwrap();
        let image = mosaic_image(64, seed);
        let crop = CropSpec { offset_y: 16, offset_x: 16, size: 32 };
        let batch = vec![build_training_example(&image, &encoder, crop).unwrap()];
        let mut up = Upsampler::new(config.upsampler, 3).unwrap();
        let mut opt = AdamState::new(&up.weights);
        let (mut first, mut last) = (0.0, 0.0);
        for step in 0..500u64 {
            let b = train_step(&mut up, &batch, &mut opt, &config, step).unwrap();
            if step == 0 { first = b.main; }
            last = b.main;
        }
        println!("seed={seed}: initial {first:.5} final {last:.5} ratio {:.3}", last/first);
    }
}

#[test]
#[ignore]
fn probe_mosaic_multi_image() {
    let config = TrainConfig { total_steps: 800, checkpoint_interval: 0, ..TrainConfig::default() };
    let images: Vec<GuidanceImage> = (0..10).map(|i| mosaic_image(64, 1000 + i)).collect();
    let t0 = std::time::Instant::now();
    let (up, log) = train_on_images(&config, &images, None, None).unwrap();
    let w0: f64 = log[..50].iter().map(|r| r.loss_main).sum::<f64>() / 50.0;
    let w1: f64 = log[log.len() - 50..].iter().map(|r| r.loss_main).sum::<f64>() / 50.0;
    println!("multi: first-window {w0:.5} last-window {w1:.5} ratio {:.3} ({:.0}ms/step)", w1 / w0, t0.elapsed().as_millis() as f64 / 800.0);

    // bilinear margin on held-out images
    use featrise::feature_io::{resize_bilinear};
    let encoder = ToyEncoder::new(config.encoder).unwrap();
    let mut model_cos = 0.0;
    let mut bilinear_cos = 0.0;
    let mut n = 0.0;
    for i in 0..5 {
        let img = mosaic_image(64, 9000 + i);
        let p = encoder.encode(&resize_bilinear(&img, 32, 32).unwrap()).unwrap();
        let truth = encoder.encode(&img).unwrap(); // 8x8 grid
        let guide = resize_bilinear(&img, 8, 8).unwrap();
        let pred = up.upsample(&guide, &p).unwrap();
        let base = resize_bilinear(&p, 8, 8).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let cos = |a: &[f32], b: &[f32]| {
                    let dot: f64 = a.iter().zip(b).map(|(&u, &v)| u as f64 * v as f64).sum();
                    let na: f64 = a.iter().map(|&u| (u as f64).powi(2)).sum::<f64>().sqrt();
                    let nb: f64 = b.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
                    dot / (na * nb).max(1e-12)
                };
                model_cos += cos(pred.pixel(y, x), truth.pixel(y, x));
                bilinear_cos += cos(base.pixel(y, x), truth.pixel(y, x));
                n += 1.0;
            }
        }
    }
    println!("held-out cosine: model {:.4} bilinear {:.4} margin {:.4}", model_cos / n, bilinear_cos / n, (model_cos - bilinear_cos) / n);
}
