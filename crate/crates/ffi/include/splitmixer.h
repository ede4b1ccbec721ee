#ifndef SPLITMIXER_H
#define SPLITMIXER_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum SpmxStatus {
  SPMX_STATUS_OK = 0,
  SPMX_STATUS_VERIFICATION_FAILED = 1,
  SPMX_STATUS_INVALID_ARGUMENT = 2,
  SPMX_STATUS_NUMERICAL = 3,
  SPMX_STATUS_IO = 4,
  SPMX_STATUS_FORMAT = 5,
  SPMX_STATUS_NULL_POINTER = 6,
  SPMX_STATUS_PANIC = 7,
} SpmxStatus;

// Opaque network handle.
typedef struct SpmxModel SpmxModel;

// Costs of a model and of its ConvMixer baseline at one input size.
typedef struct SpmxCost {
  uint64_t params;
  uint64_t macs;
  uint64_t baseline_params;
  uint64_t baseline_macs;
} SpmxCost;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or NULL if none failed yet.
//
// The pointer stays valid until the next failing call on the same thread.
const char *spmx_last_error(void);

// Library version as a static NUL-terminated string.
const char *spmx_version(void);

// Builds a model from a name such as `SplitMixer-I-256/8` with default knobs.
//
// # Safety
// `name` must be a NUL-terminated string and `out` a valid pointer.
enum SpmxStatus spmx_model_new(const char *name, uint64_t seed, struct SpmxModel **out);

// Builds a model from configuration text (`[model]` section, `key = value` lines).
//
// `model.seed` in the text sets the initialization seed.
//
// # Safety
// `config` must be a NUL-terminated string and `out` a valid pointer.
enum SpmxStatus spmx_model_from_config(const char *config, struct SpmxModel **out);

// Loads a model from a checkpoint file.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum SpmxStatus spmx_model_load(const char *path, struct SpmxModel **out);

// Writes the model's weights and normalization state to a checkpoint file.
//
// # Safety
// `model` must come from a constructor here; `path` must be a NUL-terminated string.
enum SpmxStatus spmx_model_save(const struct SpmxModel *model, const char *path);

// Releases a model. NULL is accepted and ignored.
//
// # Safety
// `model` must come from a constructor here and must not be used afterwards.
void spmx_model_free(struct SpmxModel *model);

// Number of trainable parameters.
//
// # Safety
// `model` must come from a constructor here and `out` must be valid.
enum SpmxStatus spmx_model_param_count(const struct SpmxModel *model, uint64_t *out);

// Input channels and output classes the model expects.
//
// # Safety
// `model` must come from a constructor here; both out pointers must be valid.
enum SpmxStatus spmx_model_io(const struct SpmxModel *model, size_t *in_channels, size_t *classes);

// Copies the canonical model name into `buf` (NUL-terminated, truncated to `cap`).
//
// `needed` receives the full length without the NUL; pass `cap = 0` to query it.
//
// # Safety
// `buf` must hold `cap` bytes (may be NULL when `cap` is 0); `needed` must be valid.
enum SpmxStatus spmx_model_name(const struct SpmxModel *model,
                                char *buf,
                                size_t cap,
                                size_t *needed);

// Inference-mode logits for an NCHW `float` batch.
//
// `logits` must hold `n * classes` floats, written row-major by image.
//
// # Safety
// `input` must hold `n * c * h * w` floats and `logits` `logits_len` floats.
enum SpmxStatus spmx_model_forward(struct SpmxModel *model,
                                   const float *input,
                                   size_t n,
                                   size_t c,
                                   size_t h,
                                   size_t w,
                                   float *logits,
                                   size_t logits_len);

// Parameter and MAC counts for one image of `height x width`, with the ConvMixer baseline.
//
// # Safety
// `model` must come from a constructor here and `out` must be valid.
enum SpmxStatus spmx_model_cost(const struct SpmxModel *model,
                                size_t height,
                                size_t width,
                                struct SpmxCost *out);

// Exact per-block channel-mix saving versus a full mix, as `numer / denom`.
//
// # Safety
// `model` must come from a constructor here; both out pointers must be valid.
enum SpmxStatus spmx_model_saving(const struct SpmxModel *model, int64_t *numer, int64_t *denom);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SPLITMIXER_H */
