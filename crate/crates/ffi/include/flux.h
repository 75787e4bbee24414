#ifndef FLUX_H
#define FLUX_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum FluxStatus {
  FLUX_STATUS_OK = 0,
  FLUX_STATUS_NULL_POINTER = 1,
  FLUX_STATUS_INVALID_ARGUMENT = 2,
  FLUX_STATUS_INVALID_CONFIG = 3,
  FLUX_STATUS_SELECTION = 4,
  FLUX_STATUS_CHECKPOINT = 5,
  FLUX_STATUS_IO = 6,
  FLUX_STATUS_RUNTIME = 7,
  FLUX_STATUS_PANIC = 8,
} FluxStatus;

// Opaque model handle.
typedef struct FluxModel FluxModel;

// A (frames, resolution) grid and its token layout.
typedef struct FluxGrid {
  size_t frames;
  size_t resolution;
  size_t t;
  size_t gh;
  size_t gw;
  size_t pool;
} FluxGrid;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread (empty after a success).
// The pointer stays valid until the next call into the library on this
// thread.
const char *flux_last_error(void);

// Library version as a static string.
const char *flux_version(void);

// Releases a string returned by this library. Null is ignored.
//
// # Safety
// `s` must come from this library and not have been freed.
void flux_string_free(char *s);

// MAC breakdown of a ViT of width `d_model` and `depth` blocks (MLP ×4,
// 64-wide heads, 400 classes, 1×14×14 patches) at `tokens` tokens, as JSON.
//
// # Safety
// `out_json` must be a valid pointer to writable storage.
enum FluxStatus flux_flops_json(size_t d_model, size_t depth, size_t tokens, char **out_json);

// All admissible grids of a sampler config (JSON object with the sampler
// field names) as a JSON array.
//
// # Safety
// `sampler_json` must be a NUL-terminated string; `out_json` writable.
enum FluxStatus flux_sampler_candidates_json(const char *sampler_json, char **out_json);

// Seeded uniform draw over the admissible grids.
//
// # Safety
// `sampler_json` must be a NUL-terminated string; `out` writable.
enum FluxStatus flux_sample_grid(const char *sampler_json, uint64_t seed, struct FluxGrid *out);

// Temporal-difference scores of `t·side·side` tokens of width `dim`
// (row-major `(t, h, w)`), with norm order `p` (1 or 2).
//
// # Safety
// `tokens` must hold `t·side·side·dim` doubles, `out_scores` room for
// `t·side·side`.
enum FluxStatus flux_dynamic_scores(const double *tokens,
                                    size_t t,
                                    size_t side,
                                    size_t dim,
                                    uint32_t p,
                                    double *out_scores);

// Group-dynamic selection of `k` of the `t·side·side` scored tokens in `groups`
// temporal groups. Writes the `k` indices ascending.
//
// # Safety
// `scores` must hold `t·side·side` doubles, `out_indices` room for `k`.
enum FluxStatus flux_select_group_dynamic(const double *scores,
                                          size_t t,
                                          size_t side,
                                          size_t k,
                                          size_t groups,
                                          size_t *out_indices);

// Fresh model from a JSON model config (null for the desk-scale student).
//
// # Safety
// `config_json` must be null or NUL-terminated; `out` writable.
enum FluxStatus flux_model_new(const char *config_json, uint64_t seed, struct FluxModel **out);

// Loads a checkpoint written by the CLI or [`flux_model_save`].
//
// # Safety
// `path` must be NUL-terminated; `out` writable.
enum FluxStatus flux_model_load(const char *path, struct FluxModel **out);

// Writes `<path>` (tensor data) and its JSON index beside it.
//
// # Safety
// `model` must be a live handle; `path` NUL-terminated.
enum FluxStatus flux_model_save(const struct FluxModel *model, const char *path);

// Releases a model. Null is ignored.
//
// # Safety
// `model` must come from this library and not have been freed.
void flux_model_free(struct FluxModel *model);

// Number of output classes (0 for a null handle).
//
// # Safety
// `model` must be null or a live handle.
size_t flux_model_num_classes(const struct FluxModel *model);

// The model's config as JSON.
//
// # Safety
// `model` must be a live handle; `out_json` writable.
enum FluxStatus flux_model_config_json(const struct FluxModel *model, char **out_json);

// Classifies one clip: samples it at `frames`×`resolution`², keeps `k`
// tokens by group-dynamic selection over `groups` groups (raw-patch L2
// scores), and writes `num_classes` logits.
//
// # Safety
// `video` must hold `t·h·w·c` floats in `[T,H,W,C]` order; `out_logits`
// room for [`flux_model_num_classes`] doubles.
enum FluxStatus flux_model_forward(const struct FluxModel *model,
                                   const float *video,
                                   size_t t,
                                   size_t h,
                                   size_t w,
                                   size_t c,
                                   size_t frames,
                                   size_t resolution,
                                   size_t k,
                                   size_t groups,
                                   double *out_logits);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FLUX_H */
