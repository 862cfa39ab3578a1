#ifndef FEATRISE_H
#define FEATRISE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes for every fallible entry point.
 */
typedef enum FrStatus {
  FrOk = 0,
  FrNullArgument = 1,
  FrInvalidArgument = 2,
  FrIoError = 3,
  FrFormatError = 4,
  FrShapeError = 5,
  FrNumericError = 6,
} FrStatus;

/**
 * Opaque feature map handle (row-major h x w x c float32).
 */
typedef struct FrFeatureMap FrFeatureMap;

/**
 * Opaque trained upsampler handle.
 */
typedef struct FrUpsampler FrUpsampler;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *fr_last_error_message(void);

/**
 * Loads a trained checkpoint directory.
 *
 * # Safety
 * `checkpoint_dir` must be a valid NUL-terminated string and `out` a valid
 * destination pointer.
 */
enum FrStatus fr_upsampler_load(const char *checkpoint_dir, struct FrUpsampler **out);

/**
 * Overrides the attention window radius of a loaded model.
 *
 * # Safety
 * `upsampler` must be a live handle from [`fr_upsampler_load`].
 */
enum FrStatus fr_upsampler_set_window_radius(struct FrUpsampler *upsampler, uint32_t radius);

/**
 * # Safety
 * `upsampler` must be null or a handle from [`fr_upsampler_load`] that has
 * not been freed yet.
 */
void fr_upsampler_free(struct FrUpsampler *upsampler);

/**
 * Upsamples `features` to the resolution of the guidance image. `image`
 * points to row-major height x width x 3 float32 values in [0, 1]. The
 * result channel count equals the input channel count.
 *
 * # Safety
 * All pointers must be valid; `image` must hold `image_height *
 * image_width * 3` readable floats.
 */
enum FrStatus fr_upsample(const struct FrUpsampler *upsampler,
                          const struct FrFeatureMap *features,
                          const float *image,
                          uint32_t image_height,
                          uint32_t image_width,
                          struct FrFeatureMap **out);

/**
 * Builds a feature map from a caller buffer (row-major h x w x c).
 *
 * # Safety
 * `data` must hold `height * width * channels` readable floats; `out`
 * must be a valid destination pointer.
 */
enum FrStatus fr_feature_map_create(uint32_t height,
                                    uint32_t width,
                                    uint32_t channels,
                                    const float *data,
                                    struct FrFeatureMap **out);

/**
 * Reads an ANYT container file.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string; `out` a valid destination.
 */
enum FrStatus fr_feature_map_read(const char *path, struct FrFeatureMap **out);

/**
 * Writes a feature map as an ANYT container file.
 *
 * # Safety
 * `map` must be a live handle; `path` a valid NUL-terminated string.
 */
enum FrStatus fr_feature_map_write(const struct FrFeatureMap *map, const char *path);

/**
 * # Safety
 * `map` must be a live handle or null.
 */
uint32_t fr_feature_map_height(const struct FrFeatureMap *map);

/**
 * # Safety
 * `map` must be a live handle or null.
 */
uint32_t fr_feature_map_width(const struct FrFeatureMap *map);

/**
 * # Safety
 * `map` must be a live handle or null.
 */
uint32_t fr_feature_map_channels(const struct FrFeatureMap *map);

/**
 * Borrowed pointer to the row-major data; valid until the map is freed.
 *
 * # Safety
 * `map` must be a live handle or null.
 */
const float *fr_feature_map_data(const struct FrFeatureMap *map);

/**
 * # Safety
 * `map` must be null or a live handle that has not been freed yet.
 */
void fr_feature_map_free(struct FrFeatureMap *map);

/**
 * Runs the deterministic patch encoder on an RGB buffer (row-major
 * h x w x 3, values in [0, 1]) and returns the feature grid.
 *
 * # Safety
 * `image` must hold `height * width * 3` readable floats; `out` must be a
 * valid destination pointer.
 */
enum FrStatus fr_encode_image(const float *image,
                              uint32_t height,
                              uint32_t width,
                              uint32_t patch_size,
                              uint32_t feature_dim,
                              uint32_t hidden_dim,
                              uint64_t seed,
                              struct FrFeatureMap **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FEATRISE_H */
