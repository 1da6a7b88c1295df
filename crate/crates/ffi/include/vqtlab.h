#ifndef VQTLAB_H
#define VQTLAB_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Cache layout selector for [`vqt_cache_estimate_bytes`].
typedef enum VqtCacheLayout {
  VQT_CACHE_LAYOUT_KEY_VALUE = 0,
  VQT_CACHE_LAYOUT_INTERMEDIATE = 1,
} VqtCacheLayout;

typedef enum VqtStatus {
  VQT_STATUS_OK = 0,
  VQT_STATUS_NULL_POINTER = 1,
  VQT_STATUS_INVALID_ARGUMENT = 2,
  VQT_STATUS_IO = 3,
  VQT_STATUS_FORMAT = 4,
  VQT_STATUS_NUMERICAL_FAILURE = 5,
  VQT_STATUS_BUFFER_TOO_SMALL = 6,
  VQT_STATUS_PANIC = 7,
} VqtStatus;

// Opaque labelled image set.
typedef struct VqtDataset VqtDataset;

// Opaque weights file: backbone plus optional query tokens.
typedef struct VqtWeights VqtWeights;

// Plain-data view of a ViT configuration.
typedef struct VqtConfig {
  uint32_t d;
  uint32_t m;
  uint32_t heads;
  uint32_t mlp_ratio;
  uint32_t patch;
  uint32_t image;
  uint32_t channels;
  // 0 for the bare single-head form, 1 for pre-LN multi-head blocks.
  uint32_t full_mode;
} VqtConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or an empty string. The
// pointer stays valid until the next call into this library on the thread.
const char *vqt_last_error(void);

// Desk-scale configuration.
struct VqtConfig vqt_config_desk(void);

// ViT-B/16 configuration.
struct VqtConfig vqt_config_vit_b(void);

// Tokens per image, CLS included. Zero for an invalid configuration.
uint32_t vqt_config_tokens(struct VqtConfig cfg);

// Loads a `VQTW` file into `*out`.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum VqtStatus vqt_weights_load(const char *path, struct VqtWeights **out);

// Releases a weights handle; null is ignored.
//
// # Safety
// `w` must come from [`vqt_weights_load`] and not be used afterwards.
void vqt_weights_free(struct VqtWeights *w);

// Configuration stored in a weights file.
//
// # Safety
// `w` must be a live handle and `out` a valid pointer.
enum VqtStatus vqt_weights_config(const struct VqtWeights *w, struct VqtConfig *out);

// Query tokens per layer stored in the file, 0 when there are none.
//
// # Safety
// `w` must be a live handle and `out_t` a valid pointer.
enum VqtStatus vqt_weights_query_tokens(const struct VqtWeights *w, uint32_t *out_t);

// Loads a `VQTD` file into `*out`.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum VqtStatus vqt_dataset_load(const char *path, struct VqtDataset **out);

// Releases a dataset handle; null is ignored.
//
// # Safety
// `d` must come from [`vqt_dataset_load`] and not be used afterwards.
void vqt_dataset_free(struct VqtDataset *d);

// Sample count and class count of a dataset.
//
// # Safety
// `d` must be a live handle; the out pointers must be valid.
enum VqtStatus vqt_dataset_info(const struct VqtDataset *d,
                                uint64_t *out_len,
                                uint32_t *out_classes);

// Tunable parameter count of `strategy` (for example `"vqt"` or
// `"adaptformer+vqt"`) with `t` tokens in every layer, adapter width
// `adapter_dim` and `classes` outputs.
//
// # Safety
// `strategy` must be a NUL-terminated string and `out` a valid pointer.
enum VqtStatus vqt_count_tunable(struct VqtConfig cfg,
                                 const char *strategy,
                                 uint32_t t,
                                 uint32_t adapter_dim,
                                 uint32_t classes,
                                 uint64_t *out);

// Length of the concatenated query features plus CLS: `m * d * t + d`.
uint64_t vqt_feature_dim(uint32_t m, uint32_t d, uint32_t t);

// Bytes needed to cache `layers` layers of features for `images` images.
//
// # Safety
// `out` must be a valid pointer.
enum VqtStatus vqt_cache_estimate_bytes(struct VqtConfig cfg,
                                        enum VqtCacheLayout layout,
                                        uint32_t layers,
                                        uint64_t images,
                                        uint64_t *out);

// Runs the frozen backbone with the file's query tokens over every image
// of `data` and writes one row of [`vqt_feature_dim`] values per image
// into `out`, row-major. `*written` receives the value count; when
// `capacity` is too small it receives the required count instead.
//
// # Safety
// Handles must be live; `out` must hold `capacity` doubles.
enum VqtStatus vqt_collect_features(const struct VqtWeights *w,
                                    const struct VqtDataset *data,
                                    double *out,
                                    uint64_t capacity,
                                    uint64_t *written);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VQTLAB_H */
