//! Procedural training and evaluation images: a grid of solid color blocks
//! overlaid with random solid polygons and a gentle lighting ramp. The
//! block grid is aligned to quarter-image cells, which keeps plenty of
//! supervision targets attainable at desk scale while polygon boundaries
//! still cut across cells. Seeded and self-contained.

use rand::{Rng, SeedableRng};

use crate::feature_io::GuidanceImage;
use crate::rng::mix_seed;

/// One synthetic image. Identical (size, seed) pairs produce identical
/// pixels.
pub fn generate_image(size: usize, seed: u64) -> GuidanceImage {
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    let block = (size / 4).max(1);
    let blocks = size.div_ceil(block);
    let mut data = vec![0.0f32; size * size * 3];

    // base mosaic: independent random color per block
    let colors: Vec<[f32; 3]> = (0..blocks * blocks)
        .map(|_| [rng.gen(), rng.gen(), rng.gen()])
        .collect();
    for y in 0..size {
        for x in 0..size {
            let b = (y / block) * blocks + (x / block);
            for ch in 0..3 {
                data[(y * size + x) * 3 + ch] = colors[b][ch];
            }
        }
    }

    // solid polygons with boundaries that ignore the block grid
    let polygons = rng.gen_range(2..=4);
    for _ in 0..polygons {
        let color: [f32; 3] = [rng.gen(), rng.gen(), rng.gen()];
        let cy: f64 = rng.gen_range(size as f64 * 0.2..size as f64 * 0.8);
        let cx: f64 = rng.gen_range(size as f64 * 0.2..size as f64 * 0.8);
        let radius: f64 = rng.gen_range(size as f64 / 4.5..size as f64 / 2.4);
        let sides = rng.gen_range(3..=6);
        let mut angles: Vec<f64> = (0..sides)
            .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
            .collect();
        angles.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let verts: Vec<(f64, f64)> = angles
            .iter()
            .map(|&a| {
                let r = radius * rng.gen_range(0.7..1.0);
                (cy + r * a.sin(), cx + r * a.cos())
            })
            .collect();
        for y in 0..size {
            for x in 0..size {
                if point_in_polygon(y as f64 + 0.5, x as f64 + 0.5, &verts) {
                    for ch in 0..3 {
                        data[(y * size + x) * 3 + ch] = color[ch];
                    }
                }
            }
        }
    }

    // gentle lighting gradient across a random direction
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (dy, dx) = angle.sin_cos();
    for y in 0..size {
        for x in 0..size {
            let t = (y as f64 * dy + x as f64 * dx) / (size as f64 * std::f64::consts::SQRT_2);
            let shade = (1.0 + 0.24 * t) as f32;
            for ch in 0..3 {
                let v = &mut data[(y * size + x) * 3 + ch];
                *v = (*v * shade).clamp(0.0, 1.0);
            }
        }
    }

    GuidanceImage::new(size, size, data).expect("generated values are in range")
}

/// A batch of images with per-image seeds derived from the base seed.
pub fn generate_images(count: usize, size: usize, seed: u64) -> Vec<GuidanceImage> {
    (0..count)
        .map(|i| generate_image(size, mix_seed(seed, i as u64)))
        .collect()
}

/// Even-odd ray casting.
fn point_in_polygon(py: f64, px: f64, verts: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let n = verts.len();
    let mut j = n - 1;
    for i in 0..n {
        let (yi, xi) = verts[i];
        let (yj, xj) = verts[j];
        if (yi > py) != (yj > py) {
            let x_cross = xi + (py - yi) / (yj - yi) * (xj - xi);
            if px < x_cross {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}
