#ifndef COT_H
#define COT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Label value marking an unlabeled row.
#define COT_UNLABELED -1

typedef enum CotStatus {
  COT_STATUS_OK = 0,
  COT_STATUS_NULL_POINTER = 1,
  COT_STATUS_INVALID_INPUT = 2,
  COT_STATUS_PARSE = 3,
  COT_STATUS_IO = 4,
  COT_STATUS_JSON = 5,
  COT_STATUS_NON_CONVERGENCE = 6,
  COT_STATUS_UNDEFINED_FIT = 7,
  COT_STATUS_ORACLE_TOO_LARGE = 8,
  COT_STATUS_PANIC = 9,
} CotStatus;

typedef enum CotMethod {
  COT_METHOD_COT = 0,
  COT_METHOD_AC = 1,
  COT_METHOD_ENTROPY = 2,
  COT_METHOD_ATC_MC = 3,
  COT_METHOD_ATC_NE = 4,
  COT_METHOD_GDE = 5,
} CotMethod;

// A fitted temperature.
typedef struct CotCalibration CotCalibration;

// Logits rows with optional labels.
typedef struct CotDataset CotDataset;

// Source-side inputs for [`cot_estimate`]. Pointer fields may be null.
typedef struct CotSource {
  // Labeled validation set: source labels for COT, threshold for ATC,
  // and the temperature when `calibration` is null.
  const struct CotDataset *val;
  const struct CotCalibration *calibration;
  // Source label probabilities (`num_label_probs` entries); replaces the
  // validation labels for COT when non-null.
  const double *label_probs;
  size_t num_label_probs;
  // Zero selects the default of 2000.
  size_t batch_size;
  uint64_t seed;
} CotSource;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or null if it succeeded.
// The pointer stays valid until the next call into this library on the same
// thread.
const char *cot_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *cot_version(void);

// Builds a dataset from a row-major `num_rows x num_classes` logits buffer.
// `labels` may be null (all rows unlabeled); otherwise it holds `num_rows`
// entries where `COT_UNLABELED` marks an unlabeled row.
//
// # Safety
// Buffers must be valid for the given lengths; `out` must be writable.
enum CotStatus cot_dataset_new(size_t num_rows,
                               size_t num_classes,
                               const double *logits,
                               const int64_t *labels,
                               struct CotDataset **out);

// Reads a `label,logit_0,...` CSV file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum CotStatus cot_dataset_load_csv(const char *path, struct CotDataset **out);

// # Safety
// `dataset` must come from this library and not be used afterwards.
void cot_dataset_free(struct CotDataset *dataset);

// # Safety
// `dataset` must be a live handle or null.
size_t cot_dataset_num_rows(const struct CotDataset *dataset);

// # Safety
// `dataset` must be a live handle or null.
size_t cot_dataset_num_classes(const struct CotDataset *dataset);

// Top-1 error of a fully labeled dataset.
//
// # Safety
// `dataset` must be a live handle; `out` must be writable.
enum CotStatus cot_dataset_error(const struct CotDataset *dataset, double *out);

// Fits a temperature on a fully labeled validation set.
//
// # Safety
// `val` must be a live handle; `out` must be writable.
enum CotStatus cot_calibration_fit(const struct CotDataset *val, struct CotCalibration **out);

// Loads a calibration JSON written by `cot calibrate` or `cot_calibration_save`.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum CotStatus cot_calibration_load(const char *path, struct CotCalibration **out);

// # Safety
// `calibration` must be a live handle; `path` a NUL-terminated string.
enum CotStatus cot_calibration_save(const struct CotCalibration *calibration, const char *path);

// # Safety
// `calibration` must be a live handle; `out` must be writable.
enum CotStatus cot_calibration_temperature(const struct CotCalibration *calibration, double *out);

// # Safety
// `calibration` must come from this library and not be used afterwards.
void cot_calibration_free(struct CotCalibration *calibration);

// Estimates the error of `target` with `method`, a `CotMethod` value.
// `second` is the second model's logits on the same rows and is only read
// by GDE.
//
// # Safety
// `source` and `target` must be valid; `second` may be null; `out` must be
// writable.
enum CotStatus cot_estimate(uint32_t method,
                            const struct CotSource *source,
                            const struct CotDataset *target,
                            const struct CotDataset *second,
                            double *out);

// Exact EMD under the L1 ground metric between two weighted point clouds
// of dimension `dim`. Null weights mean uniform.
//
// # Safety
// Point buffers hold `m * dim` and `n * dim` values, weight buffers `m` and
// `n`; `out` must be writable.
enum CotStatus cot_emd(size_t dim,
                       size_t m,
                       const double *a_points,
                       const double *a_weights,
                       size_t n,
                       const double *b_points,
                       const double *b_weights,
                       double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* COT_H */
