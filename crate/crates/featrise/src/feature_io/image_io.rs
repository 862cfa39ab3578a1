//! 8-bit RGB PNG decoding and encoding.

use std::path::Path;

use image::{DynamicImage, ImageFormat, ImageReader, RgbImage};

use super::GuidanceImage;
use crate::error::{Error, Result};

/// Loads an 8-bit PNG as a guidance image with values `byte / 255`.
/// Grayscale is replicated to three channels; alpha is dropped.
pub fn load_image(path: impl AsRef<Path>) -> Result<GuidanceImage> {
    let reader = ImageReader::open(&path)?
        .with_guessed_format()
        .map_err(Error::Io)?;
    match reader.format() {
        Some(ImageFormat::Png) => {}
        other => {
            return Err(Error::format(format!(
                "expected a PNG file, detected {other:?}"
            )))
        }
    }
    let decoded = reader
        .decode()
        .map_err(|e| Error::format(format!("png decode failed: {e}")))?;
    let rgb: RgbImage = match decoded {
        DynamicImage::ImageLuma8(_)
        | DynamicImage::ImageLumaA8(_)
        | DynamicImage::ImageRgb8(_)
        | DynamicImage::ImageRgba8(_) => decoded.to_rgb8(),
        other => {
            return Err(Error::Unsupported(format!(
                "only 8-bit PNGs are handled, got {:?}",
                other.color()
            )))
        }
    };
    let (w, h) = rgb.dimensions();
    let data = rgb.as_raw().iter().map(|&b| b as f32 / 255.0).collect();
    GuidanceImage::new(h as usize, w as usize, data)
}

/// Writes a guidance image as an 8-bit RGB PNG (values rounded to bytes).
pub fn save_image(img: &GuidanceImage, path: impl AsRef<Path>) -> Result<()> {
    let bytes: Vec<u8> = img
        .data()
        .iter()
        .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    let rgb = RgbImage::from_raw(img.width() as u32, img.height() as u32, bytes)
        .expect("buffer sized from image dims");
    rgb.save_with_format(path, ImageFormat::Png)
        .map_err(|e| Error::format(format!("png encode failed: {e}")))
}
