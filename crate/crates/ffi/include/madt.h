#ifndef MADT_H
#define MADT_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result code of every fallible call.
 */
typedef enum MadtStatus {
  MADT_STATUS_OK = 0,
  /*
   A required pointer was null.
   */
  MADT_STATUS_ERR_NULL_POINTER = 1,
  /*
   Bad size, non-UTF-8 path or out-of-range value.
   */
  MADT_STATUS_ERR_INVALID_ARGUMENT = 2,
  MADT_STATUS_ERR_DIMENSION = 3,
  MADT_STATUS_ERR_NUMERIC = 4,
  MADT_STATUS_ERR_CONFIG = 5,
  MADT_STATUS_ERR_CHECKPOINT = 6,
  MADT_STATUS_ERR_IO = 7,
  /*
   Other input or calibration problems.
   */
  MADT_STATUS_ERR_DATA = 8,
  MADT_STATUS_ERR_PANIC = 9,
} MadtStatus;

/*
 Trained detector. Create with [`madt_model_load`], release with
 [`madt_model_free`].
 */
typedef struct MadtModel MadtModel;

/*
 Per-window diagnosis.
 */
typedef struct MadtWindowSummary {
  size_t flagged_points;
  /*
   Temporal residual rows above threshold; 0 without a temporal branch.
   */
  size_t duration_estimate;
  size_t flagged_sensors;
  /*
   Most suspicious sensor, or `SIZE_MAX` without a spatial branch.
   */
  size_t top_sensor;
} MadtWindowSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Loads a checkpoint written by `madt train`. On success `*out` owns a new
 handle.

 # Safety
 `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum MadtStatus madt_model_load(const char *path, struct MadtModel **out);

/*
 Releases a handle. Null is ignored.

 # Safety
 `model` must come from [`madt_model_load`] and not be used afterwards.
 */
void madt_model_free(struct MadtModel *model);

/*
 Window length and sensor count the model expects.

 # Safety
 `model` must be a live handle; `w` and `n` writable.
 */
enum MadtStatus madt_model_shape(const struct MadtModel *model, size_t *w, size_t *n);

/*
 Calibrated point, sensor and temporal thresholds.

 # Safety
 `model` must be a live handle; `out` must hold 3 doubles.
 */
enum MadtStatus madt_model_thresholds(const struct MadtModel *model, double *out);

/*
 Temporal (`w x w`) and spatial (`n x n`) state matrices of a row-major
 `w x n` window. Either output may be null to skip it.

 # Safety
 `values` must hold `w * n` doubles; non-null outputs `w * w` and `n * n`.
 */
enum MadtStatus madt_state_matrices(const double *values,
                                    size_t w,
                                    size_t n,
                                    double tau_t,
                                    double tau_s,
                                    double *temporal_out,
                                    double *spatial_out);

/*
 Raw scores of one unnormalized row-major `w x n` window: per-timestep
 point scores (`w`), per-sensor scores (`n`) and temporal row scores (`w`).
 Outputs may be null. Scores of a disabled branch are NaN.

 # Safety
 `model` must be a live handle and `values` hold `w * n` doubles.
 */
enum MadtStatus madt_score_window(const struct MadtModel *model,
                                  const double *values,
                                  double *point_out,
                                  double *sensor_out,
                                  double *temporal_out);

/*
 Thresholded diagnosis of one window. `point_flags_out` (`w` bytes, 0/1)
 and `ranking_out` (`n` sensor indices, most suspicious first) may be null.

 # Safety
 `model` must be a live handle, `values` hold `w * n` doubles and
 `summary_out` be writable.
 */
enum MadtStatus madt_detect_window(const struct MadtModel *model,
                                   const double *values,
                                   uint8_t *point_flags_out,
                                   size_t *ranking_out,
                                   struct MadtWindowSummary *summary_out);

/*
 Message of the most recent call on this thread; empty when it succeeded.
 The pointer stays valid until the next call on the same thread.
 */
const char *madt_last_error(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *madt_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MADT_H */
