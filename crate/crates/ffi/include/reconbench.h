#ifndef RECONBENCH_H
#define RECONBENCH_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum RbStatus {
  RB_STATUS_OK = 0,
  RB_STATUS_NULL_POINTER = 1,
  RB_STATUS_INVALID_ARGUMENT = 2,
  RB_STATUS_DIMENSION_MISMATCH = 3,
  RB_STATUS_UNKNOWN_ID = 4,
  RB_STATUS_INSUFFICIENT_SAMPLES = 5,
  RB_STATUS_IO = 6,
  /**
   * A Rust panic was caught at the boundary.
   */
  RB_STATUS_INTERNAL = 7,
} RbStatus;

/**
 * Which per-sample distance to read from a report.
 */
typedef enum RbSampleMetric {
  RB_SAMPLE_METRIC_SSIM = 0,
  RB_SAMPLE_METRIC_PSNR = 1,
  RB_SAMPLE_METRIC_MSE = 2,
} RbSampleMetric;

/**
 * Opaque image set.
 */
typedef struct RbDataset RbDataset;

/**
 * Opaque metric report.
 */
typedef struct RbReport RbReport;

/**
 * Minimal knowledge an attack needs. Levels count up from the weakest:
 * training type 0 static / 1 dynamic, model access 0 black-box /
 * 1 white-box, dataset access 0 none / 1 similar / 2 same distribution.
 */
typedef struct RbKnowledge {
  uint32_t training_type;
  uint32_t model_access;
  uint32_t dataset_access;
} RbKnowledge;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *rb_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *rb_version(void);

/**
 * Creates an empty image set of `height × width × channels` images.
 *
 * # Safety
 * `out` must be a valid pointer to write the handle to.
 */
enum RbStatus rb_dataset_new(size_t height,
                             size_t width,
                             size_t channels,
                             size_t classes,
                             struct RbDataset **out);

/**
 * Appends one image of `len` values in `[0, 1]`, channel-last.
 *
 * # Safety
 * `ds` must come from [`rb_dataset_new`]; `pixels` must point to `len`
 * floats.
 */
enum RbStatus rb_dataset_push(struct RbDataset *ds, const float *pixels, size_t len, size_t label);

/**
 * Number of images, 0 for a null handle.
 *
 * # Safety
 * `ds` must be null or come from [`rb_dataset_new`].
 */
size_t rb_dataset_len(const struct RbDataset *ds);

/**
 * # Safety
 * `ds` must be null or an unfreed handle from [`rb_dataset_new`].
 */
void rb_dataset_free(struct RbDataset *ds);

/**
 * Mean squared error of two images of `len` values.
 *
 * # Safety
 * `a` and `b` must point to `len` floats; `out` must be writable.
 */
enum RbStatus rb_mse(const float *a, const float *b, size_t len, double *out);

/**
 * PSNR in dB for pixel range 1, capped for identical images.
 *
 * # Safety
 * As [`rb_mse`].
 */
enum RbStatus rb_psnr(const float *a, const float *b, size_t len, double *out);

/**
 * Mean SSIM of two channel-last images.
 *
 * # Safety
 * `a` and `b` must point to `height * width * channels` floats.
 */
enum RbStatus rb_ssim(const float *a,
                      const float *b,
                      size_t height,
                      size_t width,
                      size_t channels,
                      double *out);

/**
 * Scores reconstructions against targets with every sample metric and
 * the distribution distance under `extractor` (e.g. `"pool7"`).
 *
 * # Safety
 * `rec` and `tar` must be live dataset handles, `extractor` a
 * NUL-terminated string and `out` writable.
 */
enum RbStatus rb_evaluate(const struct RbDataset *rec,
                          const struct RbDataset *tar,
                          const char *extractor,
                          struct RbReport **out);

/**
 * # Safety
 * `report` must be a live report handle and `out` writable.
 */
enum RbStatus rb_report_d_dis(const struct RbReport *report, double *out);

/**
 * Sample distance and coverage (a fraction) for one metric.
 *
 * # Safety
 * `report` must be a live report handle; `s_dis` and `coverage` writable.
 */
enum RbStatus rb_report_sample(const struct RbReport *report,
                               enum RbSampleMetric metric,
                               double *s_dis,
                               double *coverage);

/**
 * The report as JSON; free with [`rb_string_free`]. Null on failure.
 *
 * # Safety
 * `report` must be null or a live report handle.
 */
char *rb_report_to_json(const struct RbReport *report);

/**
 * # Safety
 * `report` must be null or an unfreed report handle.
 */
void rb_report_free(struct RbReport *report);

/**
 * # Safety
 * `s` must be null or a string returned by this library.
 */
void rb_string_free(char *s);

/**
 * Minimal knowledge triple of an attack id such as `"mi_face"`.
 *
 * # Safety
 * `attack_id` must be a NUL-terminated string and `out` writable.
 */
enum RbStatus rb_classify_attack(const char *attack_id, struct RbKnowledge *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RECONBENCH_H */
