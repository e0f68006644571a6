#ifndef DUALDIFF_H
#define DUALDIFF_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DdStatus {
  DD_STATUS_OK = 0,
  DD_STATUS_NULL_POINTER = 1,
  DD_STATUS_INVALID_ARGUMENT = 2,
  DD_STATUS_SHAPE = 3,
  DD_STATUS_DATA = 4,
  DD_STATUS_NUMERICAL = 5,
  DD_STATUS_MISSING_CHECKPOINT = 6,
  DD_STATUS_IO = 7,
  DD_STATUS_USAGE = 8,
  DD_STATUS_BUFFER_TOO_SMALL = 9,
  DD_STATUS_PANIC = 10,
} DdStatus;

/**
 * A loaded three-network model.
 */
typedef struct DdBundle DdBundle;

/**
 * An RGB or grayscale image with values in `[0, 1]`.
 */
typedef struct DdImage DdImage;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the calling thread's last failure, or null. Valid until the
 * next failing call on the same thread.
 */
const char *dd_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *dd_version(void);

/**
 * Load `encoder.ckpt`, `kernel.ckpt` and `recon.ckpt` from `dir`.
 *
 * # Safety
 * `dir` must be a NUL-terminated string; `out` must be writable.
 */
enum DdStatus dd_bundle_load(const char *dir, struct DdBundle **out);

/**
 * Upscaling factor of the bundle, or 0 for a null handle.
 *
 * # Safety
 * `bundle` must come from `dd_bundle_load`.
 */
size_t dd_bundle_scale(const struct DdBundle *bundle);

/**
 * Number of values in a predicted kernel (`kernel_size²`).
 *
 * # Safety
 * `bundle` must come from `dd_bundle_load`.
 */
size_t dd_bundle_kernel_len(const struct DdBundle *bundle);

/**
 * # Safety
 * `bundle` must come from `dd_bundle_load` or be null; it is invalid afterwards.
 */
void dd_bundle_free(struct DdBundle *bundle);

/**
 * Image from interleaved 8-bit samples, `channels` 1 or 3.
 *
 * # Safety
 * `data` must hold `width * height * channels` bytes.
 */
enum DdStatus dd_image_from_u8(const uint8_t *data,
                               size_t width,
                               size_t height,
                               size_t channels,
                               struct DdImage **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum DdStatus dd_image_load_png(const char *path, struct DdImage **out);

/**
 * # Safety
 * `image` must be a live handle; `path` a NUL-terminated string.
 */
enum DdStatus dd_image_save_png(const struct DdImage *image, const char *path);

/**
 * # Safety
 * `image` must be a live handle or null.
 */
size_t dd_image_width(const struct DdImage *image);

/**
 * # Safety
 * `image` must be a live handle or null.
 */
size_t dd_image_height(const struct DdImage *image);

/**
 * # Safety
 * `image` must be a live handle or null.
 */
size_t dd_image_channels(const struct DdImage *image);

/**
 * Copy interleaved 8-bit samples into `buf`, which must hold
 * `width * height * channels` bytes.
 *
 * # Safety
 * `buf` must be writable for `len` bytes.
 */
enum DdStatus dd_image_to_u8(const struct DdImage *image, uint8_t *buf, size_t len);

/**
 * # Safety
 * `image` must be a live handle or null; it is invalid afterwards.
 */
void dd_image_free(struct DdImage *image);

/**
 * Render the normalized anisotropic Gaussian kernel into `buf` (row-major,
 * `size * size` values).
 *
 * # Safety
 * `buf` must be writable for `len` values.
 */
enum DdStatus dd_kernel_render(double lambda1,
                               double lambda2,
                               double theta,
                               size_t size,
                               double *buf,
                               size_t len);

/**
 * Blur `hr` with the kernel of the given parameters and keep every
 * `scale`-th pixel.
 *
 * # Safety
 * `hr` must be a live handle; `out` must be writable.
 */
enum DdStatus dd_degrade(const struct DdImage *hr,
                         double lambda1,
                         double lambda2,
                         double theta,
                         size_t scale,
                         size_t kernel_size,
                         struct DdImage **out);

/**
 * PSNR in dB of two images of equal shape; identical images give +infinity.
 *
 * # Safety
 * `a` and `b` must be live handles; `out` must be writable.
 */
enum DdStatus dd_psnr(const struct DdImage *a, const struct DdImage *b, double *out);

/**
 * Projected kernel estimate of `lr` into `buf` (`dd_bundle_kernel_len` values).
 *
 * # Safety
 * Handles must be live; `buf` must be writable for `len` values.
 */
enum DdStatus dd_predict_kernel(const struct DdBundle *bundle,
                                const struct DdImage *lr,
                                uint64_t seed,
                                double *buf,
                                size_t len);

/**
 * Super-resolve `lr`. `out_sr` receives a new image handle; when
 * `kernel_buf` is non-null it receives the projected kernel.
 *
 * # Safety
 * Handles must be live; `out_sr` writable; `kernel_buf` null or writable for
 * `kernel_len` values.
 */
enum DdStatus dd_super_resolve(const struct DdBundle *bundle,
                               const struct DdImage *lr,
                               uint64_t seed,
                               struct DdImage **out_sr,
                               double *kernel_buf,
                               size_t kernel_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DUALDIFF_H */
