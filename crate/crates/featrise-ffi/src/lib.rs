//! C ABI for the featrise upsampler.
//!
//! Handles are opaque pointers owned by this library; every constructor has
//! a matching `_free`. Functions return [`FrStatus`]; on failure the
//! thread-local message from [`fr_last_error_message`] describes the cause.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::PathBuf;

use featrise::encoder::{EncoderConfig, ToyEncoder};
use featrise::error::Error;
use featrise::feature_io::{read_feature_map, write_feature_map, FeatureMap, GuidanceImage};
use featrise::train::load_checkpoint;
use featrise::upsampler::Upsampler;

/// Result codes for every fallible entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrStatus {
    FrOk = 0,
    FrNullArgument = 1,
    FrInvalidArgument = 2,
    FrIoError = 3,
    FrFormatError = 4,
    FrShapeError = 5,
    FrNumericError = 6,
}

/// Opaque trained upsampler handle.
pub struct FrUpsampler {
    inner: Upsampler,
}

/// Opaque feature map handle (row-major h x w x c float32).
pub struct FrFeatureMap {
    inner: FeatureMap,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let sanitized = msg.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_of(err: &Error) -> FrStatus {
    match err {
        Error::Io(_) => FrStatus::FrIoError,
        Error::Format(_) | Error::Unsupported(_) => FrStatus::FrFormatError,
        Error::Shape(_) => FrStatus::FrShapeError,
        Error::Invalid(_) => FrStatus::FrInvalidArgument,
        Error::Numeric(_) => FrStatus::FrNumericError,
    }
}

fn fail(err: Error) -> FrStatus {
    let status = status_of(&err);
    set_error(&err.to_string());
    status
}

fn fail_null(what: &str) -> FrStatus {
    set_error(&format!("null argument: {what}"));
    FrStatus::FrNullArgument
}

unsafe fn path_from(ptr: *const c_char) -> Result<PathBuf, FrStatus> {
    if ptr.is_null() {
        return Err(fail_null("path"));
    }
    match CStr::from_ptr(ptr).to_str() {
        Ok(s) => Ok(PathBuf::from(s)),
        Err(_) => {
            set_error("path is not valid UTF-8");
            Err(FrStatus::FrInvalidArgument)
        }
    }
}

/// Message for the most recent failure on this thread. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn fr_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Loads a trained checkpoint directory.
///
/// # Safety
/// `checkpoint_dir` must be a valid NUL-terminated string and `out` a valid
/// destination pointer.
#[no_mangle]
pub unsafe extern "C" fn fr_upsampler_load(
    checkpoint_dir: *const c_char,
    out: *mut *mut FrUpsampler,
) -> FrStatus {
    if out.is_null() {
        return fail_null("out");
    }
    let path = match path_from(checkpoint_dir) {
        Ok(p) => p,
        Err(status) => return status,
    };
    match load_checkpoint(&path) {
        Ok(ckpt) => {
            *out = Box::into_raw(Box::new(FrUpsampler {
                inner: ckpt.upsampler,
            }));
            FrStatus::FrOk
        }
        Err(e) => fail(e),
    }
}

/// Overrides the attention window radius of a loaded model.
///
/// # Safety
/// `upsampler` must be a live handle from [`fr_upsampler_load`].
#[no_mangle]
pub unsafe extern "C" fn fr_upsampler_set_window_radius(
    upsampler: *mut FrUpsampler,
    radius: u32,
) -> FrStatus {
    match upsampler.as_mut() {
        Some(up) => {
            up.inner.config.window_radius = radius as usize;
            FrStatus::FrOk
        }
        None => fail_null("upsampler"),
    }
}

/// # Safety
/// `upsampler` must be null or a handle from [`fr_upsampler_load`] that has
/// not been freed yet.
#[no_mangle]
pub unsafe extern "C" fn fr_upsampler_free(upsampler: *mut FrUpsampler) {
    if !upsampler.is_null() {
        drop(Box::from_raw(upsampler));
    }
}

/// Upsamples `features` to the resolution of the guidance image. `image`
/// points to row-major height x width x 3 float32 values in [0, 1]. The
/// result channel count equals the input channel count.
///
/// # Safety
/// All pointers must be valid; `image` must hold `image_height *
/// image_width * 3` readable floats.
#[no_mangle]
pub unsafe extern "C" fn fr_upsample(
    upsampler: *const FrUpsampler,
    features: *const FrFeatureMap,
    image: *const f32,
    image_height: u32,
    image_width: u32,
    out: *mut *mut FrFeatureMap,
) -> FrStatus {
    let Some(up) = upsampler.as_ref() else {
        return fail_null("upsampler");
    };
    let Some(feats) = features.as_ref() else {
        return fail_null("features");
    };
    if image.is_null() {
        return fail_null("image");
    }
    if out.is_null() {
        return fail_null("out");
    }
    let len = image_height as usize * image_width as usize * 3;
    let pixels = std::slice::from_raw_parts(image, len).to_vec();
    let guidance = match GuidanceImage::new(image_height as usize, image_width as usize, pixels) {
        Ok(img) => img,
        Err(e) => return fail(e),
    };
    match up.inner.upsample(&guidance, &feats.inner) {
        Ok(map) => {
            *out = Box::into_raw(Box::new(FrFeatureMap { inner: map }));
            FrStatus::FrOk
        }
        Err(e) => fail(e),
    }
}

/// Builds a feature map from a caller buffer (row-major h x w x c).
///
/// # Safety
/// `data` must hold `height * width * channels` readable floats; `out`
/// must be a valid destination pointer.
#[no_mangle]
pub unsafe extern "C" fn fr_feature_map_create(
    height: u32,
    width: u32,
    channels: u32,
    data: *const f32,
    out: *mut *mut FrFeatureMap,
) -> FrStatus {
    if data.is_null() {
        return fail_null("data");
    }
    if out.is_null() {
        return fail_null("out");
    }
    let len = height as usize * width as usize * channels as usize;
    let values = std::slice::from_raw_parts(data, len).to_vec();
    match FeatureMap::new(height as usize, width as usize, channels as usize, values) {
        Ok(map) => {
            *out = Box::into_raw(Box::new(FrFeatureMap { inner: map }));
            FrStatus::FrOk
        }
        Err(e) => fail(e),
    }
}

/// Reads an ANYT container file.
///
/// # Safety
/// `path` must be a valid NUL-terminated string; `out` a valid destination.
#[no_mangle]
pub unsafe extern "C" fn fr_feature_map_read(
    path: *const c_char,
    out: *mut *mut FrFeatureMap,
) -> FrStatus {
    if out.is_null() {
        return fail_null("out");
    }
    let path = match path_from(path) {
        Ok(p) => p,
        Err(status) => return status,
    };
    match read_feature_map(&path) {
        Ok(map) => {
            *out = Box::into_raw(Box::new(FrFeatureMap { inner: map }));
            FrStatus::FrOk
        }
        Err(e) => fail(e),
    }
}

/// Writes a feature map as an ANYT container file.
///
/// # Safety
/// `map` must be a live handle; `path` a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn fr_feature_map_write(
    map: *const FrFeatureMap,
    path: *const c_char,
) -> FrStatus {
    let Some(map) = map.as_ref() else {
        return fail_null("map");
    };
    let path = match path_from(path) {
        Ok(p) => p,
        Err(status) => return status,
    };
    match write_feature_map(&map.inner, &path) {
        Ok(()) => FrStatus::FrOk,
        Err(e) => fail(e),
    }
}

/// # Safety
/// `map` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn fr_feature_map_height(map: *const FrFeatureMap) -> u32 {
    map.as_ref().map_or(0, |m| m.inner.height() as u32)
}

/// # Safety
/// `map` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn fr_feature_map_width(map: *const FrFeatureMap) -> u32 {
    map.as_ref().map_or(0, |m| m.inner.width() as u32)
}

/// # Safety
/// `map` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn fr_feature_map_channels(map: *const FrFeatureMap) -> u32 {
    map.as_ref().map_or(0, |m| m.inner.channels() as u32)
}

/// Borrowed pointer to the row-major data; valid until the map is freed.
///
/// # Safety
/// `map` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn fr_feature_map_data(map: *const FrFeatureMap) -> *const f32 {
    map.as_ref()
        .map_or(std::ptr::null(), |m| m.inner.data().as_ptr())
}

/// # Safety
/// `map` must be null or a live handle that has not been freed yet.
#[no_mangle]
pub unsafe extern "C" fn fr_feature_map_free(map: *mut FrFeatureMap) {
    if !map.is_null() {
        drop(Box::from_raw(map));
    }
}

/// Runs the deterministic patch encoder on an RGB buffer (row-major
/// h x w x 3, values in [0, 1]) and returns the feature grid.
///
/// # Safety
/// `image` must hold `height * width * 3` readable floats; `out` must be a
/// valid destination pointer.
#[no_mangle]
pub unsafe extern "C" fn fr_encode_image(
    image: *const f32,
    height: u32,
    width: u32,
    patch_size: u32,
    feature_dim: u32,
    hidden_dim: u32,
    seed: u64,
    out: *mut *mut FrFeatureMap,
) -> FrStatus {
    if image.is_null() {
        return fail_null("image");
    }
    if out.is_null() {
        return fail_null("out");
    }
    let len = height as usize * width as usize * 3;
    let pixels = std::slice::from_raw_parts(image, len).to_vec();
    let guidance = match GuidanceImage::new(height as usize, width as usize, pixels) {
        Ok(img) => img,
        Err(e) => return fail(e),
    };
    let encoder = match ToyEncoder::new(EncoderConfig {
        patch_size: patch_size as usize,
        feature_dim: feature_dim as usize,
        hidden_dim: hidden_dim as usize,
        seed,
    }) {
        Ok(enc) => enc,
        Err(e) => return fail(e),
    };
    match encoder.encode(&guidance) {
        Ok(map) => {
            *out = Box::into_raw(Box::new(FrFeatureMap { inner: map }));
            FrStatus::FrOk
        }
        Err(e) => fail(e),
    }
}
