#ifndef RFBSR_H
#define RFBSR_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of a call. Values 3 and above match the CLI exit codes.
typedef enum RfbsrStatus {
  RFBSR_STATUS_OK = 0,
  RFBSR_STATUS_NULL_POINTER = 1,
  RFBSR_STATUS_PANIC = 2,
  RFBSR_STATUS_IO = 3,
  RFBSR_STATUS_IMAGE = 4,
  RFBSR_STATUS_CONFIG = 5,
  RFBSR_STATUS_CHECKPOINT = 6,
  RFBSR_STATUS_DIVERGED = 7,
  RFBSR_STATUS_SHAPE = 9,
  RFBSR_STATUS_INVALID_ARGUMENT = 10,
  RFBSR_STATUS_INTERNAL = 11,
} RfbsrStatus;

// Opaque generator with loaded weights.
typedef struct RfbsrUpscaler RfbsrUpscaler;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Description of the last failure on this thread, or null if the last call
// succeeded. The pointer is valid until the next call into this library
// from the same thread.
const char *rfbsr_last_error_message(void);

// Library version as a static nul-terminated string.
const char *rfbsr_version(void);

// Builds the generator described by `config_path` (null for defaults),
// loads `checkpoint_path` into it, and stores the handle in `*out`.
//
// # Safety
// `config_path` is null or a valid string; `checkpoint_path` is a valid
// string; `out` is a valid pointer.
enum RfbsrStatus rfbsr_upscaler_new(const char *config_path,
                                    const char *checkpoint_path,
                                    struct RfbsrUpscaler **out);

// Releases a handle from [`rfbsr_upscaler_new`]. Null is ignored.
//
// # Safety
// `handle` is null or a live handle not used afterwards.
void rfbsr_upscaler_free(struct RfbsrUpscaler *handle);

// Upscaling factor of the handle's generator.
//
// # Safety
// `handle` is a live handle; `out` is a valid pointer.
enum RfbsrStatus rfbsr_upscaler_scale(const struct RfbsrUpscaler *handle, size_t *out);

// Super-resolves an `h * w` RGB image. `out` must hold
// `(h * scale) * (w * scale) * 3` floats; results are clamped to `[0, 1]`.
//
// # Safety
// `handle` is a live handle; `rgb` holds `h * w * 3` floats; `out` holds
// `out_len` writable floats.
enum RfbsrStatus rfbsr_upscale(const struct RfbsrUpscaler *handle,
                               const float *rgb,
                               size_t h,
                               size_t w,
                               float *out,
                               size_t out_len);

// Output length of resizing `len` samples by `scale`.
//
// # Safety
// `out` is a valid pointer.
enum RfbsrStatus rfbsr_resized_len(size_t len, double scale, size_t *out);

// Bicubic resize by `scale` (antialiased when shrinking, replicated
// edges). `out` must hold `resized_len(h) * resized_len(w) * channels`
// floats. Computation is in double precision.
//
// # Safety
// `src` holds `h * w * channels` floats; `out` holds `out_len` writable floats.
enum RfbsrStatus rfbsr_bicubic_resize(const float *src,
                                      size_t h,
                                      size_t w,
                                      size_t channels,
                                      double scale,
                                      float *out,
                                      size_t out_len);

// PSNR in dB between two images, capped at 100.
//
// # Safety
// `a` and `b` hold `h * w * channels` floats; `out` is a valid pointer.
enum RfbsrStatus rfbsr_psnr(const float *a,
                            const float *b,
                            size_t h,
                            size_t w,
                            size_t channels,
                            double *out);

// Mean SSIM (11x11 Gaussian window, sigma 1.5) averaged over channels.
// Images must be at least 11x11.
//
// # Safety
// `a` and `b` hold `h * w * channels` floats; `out` is a valid pointer.
enum RfbsrStatus rfbsr_ssim(const float *a,
                            const float *b,
                            size_t h,
                            size_t w,
                            size_t channels,
                            double *out);

// Writes the parameter-space mean of `count` checkpoints to `out_path`.
//
// # Safety
// `paths` holds `count` valid strings; `out_path` is a valid string.
enum RfbsrStatus rfbsr_checkpoint_average(const char *const *paths,
                                          size_t count,
                                          const char *out_path);

// Trainable parameter count of the generator described by `config_path`
// (null for defaults).
//
// # Safety
// `config_path` is null or a valid string; `out` is a valid pointer.
enum RfbsrStatus rfbsr_parameter_count(const char *config_path, uint64_t *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RFBSR_H */
