use featrise::encoder::ToyEncoder;
use featrise::losses::LossWeights;
use featrise::synthetic::generate_image;
use featrise::train::*;
use featrise::upsampler::Upsampler;

#[test]
#[ignore]
fn scan_overfit_instances() {
    for img_seed in [21u64, 5, 9, 33, 40, 77] {
        for (oy, ox) in [(16usize, 16usize), (0, 0), (32, 32), (0, 32)] {
            let mut config = TrainConfig::default();
            config.loss_weights = LossWeights::new(1.0, 0.0, 0.0).unwrap();
            let encoder = ToyEncoder::new(config.encoder).unwrap();
            let image = generate_image(64, img_seed);
            let crop = CropSpec { offset_y: oy, offset_x: ox, size: 32 };
            let batch = vec![build_training_example(&image, &encoder, crop).unwrap()];
            let mut up = Upsampler::new(config.upsampler, 3).unwrap();
            let mut opt = AdamState::new(&up.weights);
            let (mut first, mut last) = (0.0, 0.0);
            let mut monotone = true;
            let mut prev_win = f64::MAX;
            let mut window = Vec::new();
            for step in 0..500u64 {
                let b = train_step(&mut up, &batch, &mut opt, &config, step).unwrap();
                if step == 0 { first = b.main; }
                last = b.main;
                window.push(b.main);
                if window.len() == 50 {
                    let mean: f64 = window.iter().sum::<f64>() / 50.0;
                    if mean >= prev_win { monotone = false; }
                    prev_win = mean;
                    window.clear();
                }
            }
            println!("seed={img_seed} crop=({oy},{ox}): ratio {:.3} monotone={monotone}", last / first);
        }
    }
}
