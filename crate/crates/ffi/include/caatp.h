#ifndef CAATP_H
#define CAATP_H

/* Generated in cbindgen style from crates/ffi/src/lib.rs. Keep in sync. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes shared by every entry point.
 */
typedef enum CaatpStatus {
  Ok = 0,
  NullPointer = 1,
  InvalidArgument = 2,
  Image = 3,
  Checkpoint = 4,
  MissingArtifact = 5,
  Io = 6,
  Internal = 7,
  Panic = 8,
} CaatpStatus;

/**
 * Opaque handle to a loaded retouching model.
 */
typedef struct CaatpModel CaatpModel;

/**
 * Opaque handle to a loaded attribute predictor.
 */
typedef struct CaatpPredictor CaatpPredictor;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Loads a retouching model checkpoint. On success `*out` owns the handle.
 */
CaatpStatus caatp_model_load(const char *path, CaatpModel **out);

/**
 * Creates a freshly initialized model with the default architecture.
 * Before training it reproduces its input.
 */
CaatpStatus caatp_model_new(uint64_t seed, CaatpModel **out);

/**
 * Releases a model handle. Null is ignored.
 */
void caatp_model_free(CaatpModel *model);

/**
 * Loads an attribute predictor checkpoint for automatic mode.
 */
CaatpStatus caatp_predictor_load(const char *path, CaatpPredictor **out);

/**
 * Releases a predictor handle. Null is ignored.
 */
void caatp_predictor_free(CaatpPredictor *predictor);

/**
 * Retouches an image by an explicit six-component preference delta.
 * `out_rgb` receives `height * width * 3` bytes.
 */
CaatpStatus caatp_retouch(const CaatpModel *model,
                          const uint8_t *rgb,
                          uintptr_t height,
                          uintptr_t width,
                          const double *delta,
                          uint8_t *out_rgb);

/**
 * Retouches an image using the predictor to choose the target style.
 * When `out_delta` is not null it receives the delta that was applied.
 */
CaatpStatus caatp_retouch_auto(const CaatpModel *model,
                               const CaatpPredictor *predictor,
                               const uint8_t *rgb,
                               uintptr_t height,
                               uintptr_t width,
                               uint8_t *out_rgb,
                               double *out_delta);

/**
 * Renders the style sentence for a preference delta. Free the result with
 * [`caatp_string_free`].
 */
CaatpStatus caatp_render_text(const double *delta, char **out);

/**
 * Releases a string returned by this library. Null is ignored.
 */
void caatp_string_free(char *s);

/**
 * Computes the six discrete attribute levels (1 to 5) of an image.
 */
CaatpStatus caatp_attributes(const uint8_t *rgb, uintptr_t height, uintptr_t width, uint8_t *out_levels);

/**
 * Counts the distinct RGB triplets of an image.
 */
CaatpStatus caatp_unique_color_count(const uint8_t *rgb,
                                     uintptr_t height,
                                     uintptr_t width,
                                     uintptr_t *out);

/**
 * Message for the most recent failure on this thread, or null after a
 * success. The pointer stays valid until the next call on this thread.
 */
const char *caatp_last_error_message(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CAATP_H */
