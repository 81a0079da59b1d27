#ifndef FLOWMINE_H
#define FLOWMINE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FmStatus {
  FM_STATUS_OK = 0,
  FM_STATUS_NULL_POINTER = 1,
  FM_STATUS_INVALID_WINDOW = 2,
  FM_STATUS_LENGTH_MISMATCH = 3,
  FM_STATUS_INVALID_CONFIG = 4,
  FM_STATUS_INVALID_TRANSFORM = 5,
  FM_STATUS_MISSING_TARGET = 6,
  FM_STATUS_OUT_OF_RANGE = 7,
  FM_STATUS_INTERNAL = 8,
  FM_STATUS_PANIC = 9,
} FmStatus;

/**
 * Mined targets, ordered by cluster id.
 */
typedef struct FmSupervision FmSupervision;

/**
 * Frames of one window, pushed oldest first; the second-to-last frame
 * pushed is the source.
 */
typedef struct FmWindow FmWindow;

typedef struct FmEnsemblingConfig {
  double tau_cos;
  size_t top_k;
  double gamma;
  double zero_norm_eps;
  bool use_consensus_matrix;
  bool use_reliability_weights;
  bool use_aggregation;
} FmEnsemblingConfig;

/**
 * `dcls_mode`: 0 both terms, 1 point-level only, 2 cluster-level only.
 */
typedef struct FmLossConfig {
  bool enable_dcls;
  bool enable_static;
  bool enable_geom;
  uint32_t dcls_mode;
  double chamfer_truncation;
} FmLossConfig;

typedef struct FmTarget {
  uint32_t cluster_id;
  double target[3];
  size_t pool_size;
  size_t winner;
} FmTarget;

/**
 * Three-way EPE; empty categories are reported as NaN.
 */
typedef struct FmThreeWay {
  double mean;
  double fd;
  double fs;
  double bs;
  size_t count_fd;
  size_t count_fs;
  size_t count_bs;
} FmThreeWay;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

struct FmEnsemblingConfig fm_ensembling_config_default(void);

struct FmLossConfig fm_loss_config_default(void);

struct FmWindow *fm_window_new(void);

/**
 * # Safety
 * `window` must come from [`fm_window_new`] and not be freed yet.
 */
void fm_window_free(struct FmWindow *window);

/**
 * Appends a frame.
 *
 * `points` holds `3 * n` doubles; `labels` holds `n` codes (−1 static,
 * −2 dynamic noise, ≥0 cluster id). `transform` is a row-major 4×4 from
 * this frame into the sensor frame of the last frame, or null for identity.
 *
 * # Safety
 * Pointers must be valid for the stated lengths.
 */
enum FmStatus fm_window_push_frame(struct FmWindow *window,
                                   const double *points,
                                   const int32_t *labels,
                                   size_t n,
                                   const double *transform);

/**
 * # Safety
 * `window` must be null or a live handle.
 */
size_t fm_window_frame_count(const struct FmWindow *window);

/**
 * Mines targets for every source cluster with at least `min_cluster_size`
 * points. `flow` holds `3 * n` doubles for the source frame, or is null for
 * a zero flow. `config` may be null for the defaults.
 *
 * # Safety
 * Pointers must be valid for the stated lengths; `out` must be writable.
 */
enum FmStatus fm_mine_supervision(const struct FmWindow *window,
                                  const double *flow,
                                  size_t n,
                                  const struct FmEnsemblingConfig *config,
                                  size_t min_cluster_size,
                                  struct FmSupervision **out);

/**
 * # Safety
 * `sup` must be null or a live handle.
 */
size_t fm_supervision_len(const struct FmSupervision *sup);

/**
 * # Safety
 * `sup` must be a live handle and `out` writable.
 */
enum FmStatus fm_supervision_get(const struct FmSupervision *sup,
                                 size_t index,
                                 struct FmTarget *out);

/**
 * Winner supporters of one cluster. Writes up to `capacity` candidate
 * indices and stores the full count in `count`.
 *
 * # Safety
 * `out` must hold `capacity` writable entries; `count` must be writable.
 */
enum FmStatus fm_supervision_supporters(const struct FmSupervision *sup,
                                        uint32_t cluster_id,
                                        size_t *out,
                                        size_t capacity,
                                        size_t *count);

/**
 * # Safety
 * `sup` must come from [`fm_mine_supervision`] and not be freed yet.
 */
void fm_supervision_free(struct FmSupervision *sup);

/**
 * Total training loss of `flow` (3·n doubles, source frame) for targets
 * given as parallel arrays `cluster_ids` / `targets` (3·m doubles).
 *
 * # Safety
 * Pointers must be valid for the stated lengths; `out` must be writable.
 */
enum FmStatus fm_total_loss(const struct FmWindow *window,
                            const double *flow,
                            size_t n,
                            const uint32_t *cluster_ids,
                            const double *targets,
                            size_t m,
                            const struct FmLossConfig *config,
                            size_t min_cluster_size,
                            double *out);

/**
 * `classes` holds `n` codes (0 background, 1 car, 2 other, 3 pedestrian,
 * 4 VRU). `points` may be null to skip the evaluation-region filter.
 *
 * # Safety
 * Pointers must be valid for the stated lengths; `out` must be writable.
 */
enum FmStatus fm_threeway_epe(const double *pred,
                              const double *gt,
                              const int32_t *classes,
                              const double *points,
                              size_t n,
                              double dynamic_threshold,
                              struct FmThreeWay *out);

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call on the same thread.
 */
const char *fm_last_error_message(void);

const char *fm_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FLOWMINE_H */
