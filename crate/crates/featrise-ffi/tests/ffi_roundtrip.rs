//! Exercises the C ABI from Rust: container round-trips, checkpoint
//! loading, inference parity with the library, and error reporting.

use std::ffi::{CStr, CString};
use std::ptr;

use featrise::encoder::{EncoderConfig, ToyEncoder};
use featrise::feature_io::resize_bilinear;
use featrise::synthetic::generate_images;
use featrise::train::{train_on_images, TrainConfig};
use featrise::upsampler::UpsamplerConfig;
use featrise_ffi::*;

fn c_path(path: &std::path::Path) -> CString {
    CString::new(path.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(fr_last_error_message()) }
        .to_string_lossy()
        .into_owned()
}

fn tiny_train_config() -> TrainConfig {
    TrainConfig {
        image_size: 32,
        crop_size: 16,
        total_steps: 2,
        checkpoint_interval: 0,
        encoder: EncoderConfig {
            patch_size: 4,
            feature_dim: 6,
            hidden_dim: 10,
            seed: 0,
        },
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
        ..TrainConfig::default()
    }
}

#[test]
fn feature_map_create_read_write_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("map.anyt");
    let data: Vec<f32> = (0..2 * 3 * 4).map(|i| i as f32 * 0.5 - 3.0).collect();

    unsafe {
        let mut map: *mut FrFeatureMap = ptr::null_mut();
        assert_eq!(
            fr_feature_map_create(2, 3, 4, data.as_ptr(), &mut map),
            FrStatus::FrOk
        );
        assert_eq!(fr_feature_map_height(map), 2);
        assert_eq!(fr_feature_map_width(map), 3);
        assert_eq!(fr_feature_map_channels(map), 4);

        let cpath = c_path(&path);
        assert_eq!(fr_feature_map_write(map, cpath.as_ptr()), FrStatus::FrOk);

        let mut back: *mut FrFeatureMap = ptr::null_mut();
        assert_eq!(fr_feature_map_read(cpath.as_ptr(), &mut back), FrStatus::FrOk);
        let ptr = fr_feature_map_data(back);
        let values = std::slice::from_raw_parts(ptr, data.len());
        assert_eq!(values, &data[..]);

        fr_feature_map_free(map);
        fr_feature_map_free(back);
    }
}

#[test]
fn bad_reads_set_status_and_message() {
    let dir = tempfile::tempdir().unwrap();
    let missing = c_path(&dir.path().join("nope.anyt"));
    unsafe {
        let mut map: *mut FrFeatureMap = ptr::null_mut();
        assert_eq!(
            fr_feature_map_read(missing.as_ptr(), &mut map),
            FrStatus::FrIoError
        );
        assert!(!last_error().is_empty());

        let garbage = dir.path().join("garbage.anyt");
        std::fs::write(&garbage, b"XXXX").unwrap();
        let gpath = c_path(&garbage);
        assert_eq!(
            fr_feature_map_read(gpath.as_ptr(), &mut map),
            FrStatus::FrFormatError
        );

        assert_eq!(
            fr_feature_map_create(1, 1, 1, ptr::null(), &mut map),
            FrStatus::FrNullArgument
        );
    }
}

#[test]
fn invalid_dimensions_are_rejected() {
    let data = [f32::NAN];
    unsafe {
        let mut map: *mut FrFeatureMap = ptr::null_mut();
        assert_eq!(
            fr_feature_map_create(1, 1, 1, data.as_ptr(), &mut map),
            FrStatus::FrInvalidArgument
        );
        assert!(last_error().contains("finite"));
    }
}

#[test]
fn encode_matches_library_encoder() {
    let image = generate_images(1, 16, 3).pop().unwrap();
    let config = EncoderConfig {
        patch_size: 4,
        feature_dim: 5,
        hidden_dim: 8,
        seed: 9,
    };
    let expected = ToyEncoder::new(config).unwrap().encode(&image).unwrap();
    unsafe {
        let mut map: *mut FrFeatureMap = ptr::null_mut();
        assert_eq!(
            fr_encode_image(image.data().as_ptr(), 16, 16, 4, 5, 8, 9, &mut map),
            FrStatus::FrOk
        );
        let got = std::slice::from_raw_parts(fr_feature_map_data(map), expected.data().len());
        assert_eq!(got, expected.data());
        fr_feature_map_free(map);
    }
}

#[test]
fn loaded_checkpoint_matches_library_inference_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_train_config();
    let images = generate_images(2, 32, 40);
    let (upsampler, _) = train_on_images(&config, &images, Some(dir.path()), None).unwrap();

    let encoder = ToyEncoder::new(config.encoder).unwrap();
    let image = &images[0];
    let features = encoder
        .encode(&resize_bilinear(image, 16, 16).unwrap())
        .unwrap();
    let expected = upsampler.upsample(image, &features).unwrap();

    unsafe {
        let mut handle: *mut FrUpsampler = ptr::null_mut();
        let cpath = c_path(dir.path());
        assert_eq!(
            fr_upsampler_load(cpath.as_ptr(), &mut handle),
            FrStatus::FrOk,
            "{}",
            last_error()
        );

        let mut fmap: *mut FrFeatureMap = ptr::null_mut();
        assert_eq!(
            fr_feature_map_create(
                features.height() as u32,
                features.width() as u32,
                features.channels() as u32,
                features.data().as_ptr(),
                &mut fmap
            ),
            FrStatus::FrOk
        );

        let mut out: *mut FrFeatureMap = ptr::null_mut();
        assert_eq!(
            fr_upsample(
                handle,
                fmap,
                image.data().as_ptr(),
                image.height() as u32,
                image.width() as u32,
                &mut out
            ),
            FrStatus::FrOk,
            "{}",
            last_error()
        );
        assert_eq!(fr_feature_map_height(out), 32);
        assert_eq!(fr_feature_map_channels(out), 6);
        let got = std::slice::from_raw_parts(fr_feature_map_data(out), expected.data().len());
        assert_eq!(got, expected.data());

        // shape error surfaces as a status, not a crash
        let mut bad_out: *mut FrFeatureMap = ptr::null_mut();
        assert_eq!(fr_upsampler_set_window_radius(handle, 40), FrStatus::FrOk);
        assert_eq!(
            fr_upsample(
                handle,
                fmap,
                image.data().as_ptr(),
                32,
                32,
                &mut bad_out
            ),
            FrStatus::FrShapeError
        );

        fr_feature_map_free(fmap);
        fr_feature_map_free(out);
        fr_upsampler_free(handle);
    }
}

#[test]
fn missing_checkpoint_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let cpath = c_path(&dir.path().join("missing"));
    unsafe {
        let mut handle: *mut FrUpsampler = ptr::null_mut();
        assert_eq!(
            fr_upsampler_load(cpath.as_ptr(), &mut handle),
            FrStatus::FrIoError
        );
        assert_eq!(
            fr_upsampler_load(ptr::null(), &mut handle),
            FrStatus::FrNullArgument
        );
    }
}
