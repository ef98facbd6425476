#ifndef STALL_SENTINEL_H
#define STALL_SENTINEL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum SsStatus {
  SS_STATUS_OK = 0,
  SS_STATUS_NULL_POINTER = 1,
  SS_STATUS_INVALID_ARGUMENT = 2,
  SS_STATUS_IO = 3,
  SS_STATUS_PARSE = 4,
  SS_STATUS_DECODE = 5,
  SS_STATUS_DIMENSION_MISMATCH = 6,
  SS_STATUS_INSUFFICIENT_POINTS = 7,
  SS_STATUS_CONFIG = 8,
  SS_STATUS_PANIC = 9,
} SsStatus;

typedef enum SsEdgeMode {
  SS_EDGE_MODE_INTERP = 0,
  SS_EDGE_MODE_MIRROR = 1,
} SsEdgeMode;

/**
 * Streaming CUSUM detector.
 */
typedef struct SsCusum SsCusum;

/**
 * Per-pixel background mixture over 8-bit luminance frames.
 */
typedef struct SsMixtureModel SsMixtureModel;

/**
 * Mixture parameters; fill with `ss_mixture_default_params` first.
 */
typedef struct SsMixtureParams {
  size_t max_components;
  double learning_rate;
  double var_init;
  double var_floor;
  double match_threshold_sq;
  double background_ratio;
  double prune_weight;
} SsMixtureParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL if none failed.
 * The pointer stays valid until the next failing call on the same thread.
 */
const char *ss_last_error_message(void);

void ss_clear_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *ss_version(void);

/**
 * Mean windowed SSIM of two `width x height` 8-bit images with a square
 * `window` (8 is the usual choice).
 *
 * # Safety
 * `a` and `b` must each point at `width * height` bytes; `out` must be
 * writable.
 */
enum SsStatus ss_ssim(const uint8_t *a,
                      const uint8_t *b,
                      uint32_t width,
                      uint32_t height,
                      uint32_t window,
                      double *out);

/**
 * Savitzky-Golay smoothing of `n` values into `out` (also `n` long).
 *
 * # Safety
 * `values` and `out` must each point at `n` doubles.
 */
enum SsStatus ss_savgol(const double *values,
                        size_t n,
                        size_t window,
                        size_t order,
                        enum SsEdgeMode edge,
                        double *out);

/**
 * Normalised RMSE of onset delays: `min(rmse, 300) / 300`, 1 when `n` is 0.
 *
 * # Safety
 * `delays_s` must point at `n` doubles; `out` must be writable.
 */
enum SsStatus ss_nrmse(const double *delays_s, size_t n, double *out);

/**
 * `f1 * (1 - nrmse)`; both inputs must lie in [0, 1].
 *
 * # Safety
 * `out` must be writable.
 */
enum SsStatus ss_s4(double f1, double nrmse, double *out);

/**
 * Area under a precision-delay curve of `n` points with strictly
 * increasing `alphas`.
 *
 * # Safety
 * `alphas` and `precisions` must each point at `n` doubles; `out` must be
 * writable.
 */
enum SsStatus ss_apd(const double *alphas, const double *precisions, size_t n, double *out);

/**
 * # Safety
 * `out` must be writable. The handle written there must be released with
 * `ss_cusum_free`.
 */
enum SsStatus ss_cusum_new(double gamma, double h, struct SsCusum **out);

/**
 * Feeds one evidence sample. `alarm` is set when the statistic reaches `h`.
 *
 * # Safety
 * `cusum` must come from `ss_cusum_new`; `alarm` must be writable.
 */
enum SsStatus ss_cusum_push(struct SsCusum *cusum, double e_t, bool *alarm);

/**
 * Current statistic and the number of samples fed so far.
 *
 * # Safety
 * `cusum` must come from `ss_cusum_new`; `statistic` and `samples` must be
 * writable.
 */
enum SsStatus ss_cusum_state(const struct SsCusum *cusum, double *statistic, uint64_t *samples);

/**
 * # Safety
 * `cusum` must be NULL or come from `ss_cusum_new`, and not be used again.
 */
void ss_cusum_free(struct SsCusum *cusum);

/**
 * # Safety
 * `out` must be writable.
 */
enum SsStatus ss_mixture_default_params(struct SsMixtureParams *out);

/**
 * `params` may be NULL for the defaults.
 *
 * # Safety
 * A non-null `params` must be readable; `out` must be writable. The handle
 * written there must be released with `ss_mixture_free`.
 */
enum SsStatus ss_mixture_new(uint32_t width,
                             uint32_t height,
                             const struct SsMixtureParams *params,
                             struct SsMixtureModel **out);

/**
 * Updates the model with one row-major frame of `len` bytes.
 *
 * # Safety
 * `model` must come from `ss_mixture_new`; `luma` must point at `len` bytes.
 */
enum SsStatus ss_mixture_update(struct SsMixtureModel *model, const uint8_t *luma, size_t len);

/**
 * Writes the current background estimate (`len` = width * height bytes).
 *
 * # Safety
 * `model` must come from `ss_mixture_new`; `out` must point at `len`
 * writable bytes.
 */
enum SsStatus ss_mixture_render(const struct SsMixtureModel *model, uint8_t *out, size_t len);

/**
 * # Safety
 * `model` must be NULL or come from `ss_mixture_new`, and not be used again.
 */
void ss_mixture_free(struct SsMixtureModel *model);

/**
 * Runs the backtracking pipeline on one video directory (manifest.txt,
 * detections.csv, mask.pgm). `config_path` may be NULL for the defaults.
 *
 * Predicted onsets are written to `onsets_s` up to `capacity`;
 * `count` receives the total, which may exceed `capacity`.
 *
 * # Safety
 * `video_dir` and a non-null `config_path` must be NUL-terminated strings;
 * `onsets_s` must point at `capacity` doubles; `count` must be writable.
 */
enum SsStatus ss_run_video(const char *video_dir,
                           const char *config_path,
                           double *onsets_s,
                           size_t capacity,
                           size_t *count);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STALL_SENTINEL_H */
