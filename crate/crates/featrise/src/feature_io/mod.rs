//! Data model and file formats: feature-map and guidance-image containers,
//! the ANYT binary tensor format, PNG decoding, and the training-free
//! resize baselines.

mod anyt;
mod image_io;
pub(crate) mod resize;

pub use anyt::{read_feature_map, write_feature_map};
pub use image_io::{load_image, save_image};
pub use resize::{area_downsample, resize_bilinear, resize_nearest};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A spatial grid of real-valued feature vectors, row-major `[h x w x c]`,
/// channel-fastest. The central value type for low-res inputs, upsampled
/// outputs, queries and keys.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    /// Builds a map after checking dimensions and finiteness.
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::invalid(format!(
                "feature map dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::invalid(format!(
                "feature map data length {} does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("feature map contains non-finite values"));
        }
        Ok(FeatureMap {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn constant(height: usize, width: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, ch: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + ch]
    }

    /// Channel vector at one grid cell.
    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let base = (y * self.width + x) * self.channels;
        &self.data[base..base + self.channels]
    }

    pub(crate) fn to_tensor(&self) -> Tensor {
        Tensor::from_data(
            self.height,
            self.width,
            self.channels,
            self.data.iter().map(|&v| v as f64).collect(),
        )
    }

    pub(crate) fn from_tensor(t: &Tensor) -> Result<Self> {
        Self::new(t.h, t.w, t.c, t.data.iter().map(|&v| v as f32).collect())
    }
}

/// A high-resolution RGB guide, `[h x w x 3]`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl GuidanceImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid(format!(
                "image dimensions must be positive, got {height}x{width}"
            )));
        }
        if data.len() != height * width * 3 {
            return Err(Error::invalid(format!(
                "image data length {} does not match {height}x{width}x3",
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
            return Err(Error::invalid("image values must lie in [0, 1]"));
        }
        Ok(GuidanceImage {
            height,
            width,
            data,
        })
    }

    pub fn constant(height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(height, width, vec![value; height * width * 3])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, ch: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + ch]
    }

    /// RGB triple at one pixel.
    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let base = (y * self.width + x) * 3;
        &self.data[base..base + 3]
    }

    /// Pixel crop, pure indexing. The window must lie inside the image.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::shape(format!(
                "crop {height}x{width} at ({top},{left}) exceeds image {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            let base = ((top + y) * self.width + left) * 3;
            data.extend_from_slice(&self.data[base..base + width * 3]);
        }
        GuidanceImage::new(height, width, data)
    }

    pub(crate) fn to_tensor(&self) -> Tensor {
        Tensor::from_data(
            self.height,
            self.width,
            3,
            self.data.iter().map(|&v| v as f64).collect(),
        )
    }
}

mod sealed {
    pub trait Sealed {}
    impl Sealed for super::FeatureMap {}
    impl Sealed for super::GuidanceImage {}
}

/// Access shared by the two raster kinds so the resizers can stay generic.
/// Implemented only by [`FeatureMap`] and [`GuidanceImage`].
pub trait Raster: Sized + sealed::Sealed {
    fn dims(&self) -> (usize, usize, usize);
    fn raw(&self) -> &[f32];
    fn from_raw(h: usize, w: usize, c: usize, data: Vec<f32>) -> Result<Self>;
}

impl Raster for FeatureMap {
    fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    fn raw(&self) -> &[f32] {
        &self.data
    }

    fn from_raw(h: usize, w: usize, c: usize, data: Vec<f32>) -> Result<Self> {
        FeatureMap::new(h, w, c, data)
    }
}

impl Raster for GuidanceImage {
    fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, 3)
    }

    fn raw(&self) -> &[f32] {
        &self.data
    }

    fn from_raw(h: usize, w: usize, c: usize, data: Vec<f32>) -> Result<Self> {
        debug_assert_eq!(c, 3);
        // Interpolating [0,1] data can land a hair outside the range in
        // floating point; snap back before validating.
        let clamped = data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        GuidanceImage::new(h, w, clamped)
    }
}
