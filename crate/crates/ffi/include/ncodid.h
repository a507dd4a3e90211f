#ifndef NCODID_H
#define NCODID_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum NcodidEstimator {
  NCODID_ESTIMATOR_UNADJUSTED = 0,
  NCODID_ESTIMATOR_DID_NCO = 1,
  NCODID_ESTIMATOR_DID_ADJUSTED = 2,
  NCODID_ESTIMATOR_QQ = 3,
} NcodidEstimator;

/**
 * Result code of every fallible call.
 */
typedef enum NcodidStatus {
  NCODID_STATUS_OK = 0,
  NCODID_STATUS_NULL_POINTER = 1,
  NCODID_STATUS_INVALID_UTF8 = 2,
  NCODID_STATUS_DATA = 3,
  NCODID_STATUS_SCHEMA = 4,
  NCODID_STATUS_INVALID_ARGUMENT = 5,
  NCODID_STATUS_INFEASIBLE = 6,
  NCODID_STATUS_ESTIMATION = 7,
  NCODID_STATUS_BOOTSTRAP = 8,
  NCODID_STATUS_IO = 9,
  NCODID_STATUS_JSON = 10,
  NCODID_STATUS_PANIC = 11,
} NcodidStatus;

/**
 * Loaded submission dataset.
 */
typedef struct NcodidDataset NcodidDataset;

/**
 * Point estimate with its bootstrap interval.
 */
typedef struct NcodidEstimate NcodidEstimate;

/**
 * Result of optimal matching.
 */
typedef struct NcodidMatchedSample NcodidMatchedSample;

/**
 * Plain-value view of an estimate.
 */
typedef struct NcodidSummary {
  double atet;
  double ci_low;
  double ci_high;
  double level;
  size_t n_pairs;
  size_t replicates;
  size_t failed;
  /**
   * NCO threshold, or -1 without an NCO.
   */
  int64_t nco_threshold;
} NcodidSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call into this library on the same thread.
 */
const char *ncodid_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *ncodid_version(void);

/**
 * Load a submission CSV. `schema_path` may be null for the built-in
 * peer-review schema.
 *
 * # Safety
 * Paths must be null or NUL-terminated strings; `out` must be writable.
 */
enum NcodidStatus ncodid_dataset_load(const char *csv_path,
                                      const char *schema_path,
                                      struct NcodidDataset **out);

/**
 * Number of records, or 0 for a null handle.
 *
 * # Safety
 * `dataset` must be null or a live handle.
 */
size_t ncodid_dataset_len(const struct NcodidDataset *dataset);

/**
 * # Safety
 * `dataset` must be null or a handle not yet freed.
 */
void ncodid_dataset_free(struct NcodidDataset *dataset);

/**
 * Optimal 1:1 matching with the schema's roles. A positive `nco_years`
 * keeps only years whose window is complete by `evaluation_year`.
 *
 * # Safety
 * `dataset` must be a live handle; `out` must be writable.
 */
enum NcodidStatus ncodid_match(const struct NcodidDataset *dataset,
                               uint32_t nco_years,
                               int32_t evaluation_year,
                               struct NcodidMatchedSample **out);

/**
 * Number of matched pairs, or 0 for a null handle.
 *
 * # Safety
 * `matched` must be null or a live handle.
 */
size_t ncodid_matched_len(const struct NcodidMatchedSample *matched);

/**
 * Total matching distance, NaN for a null handle.
 *
 * # Safety
 * `matched` must be null or a live handle.
 */
double ncodid_matched_total_cost(const struct NcodidMatchedSample *matched);

/**
 * # Safety
 * `matched` must be null or a handle not yet freed.
 */
void ncodid_matched_free(struct NcodidMatchedSample *matched);

/**
 * Bootstrap estimate on a matched sample. `nco_years` of 0 means no NCO,
 * which only the unadjusted estimator accepts.
 *
 * # Safety
 * Handles must be live; `out` must be writable.
 */
enum NcodidStatus ncodid_estimate(const struct NcodidDataset *dataset,
                                  const struct NcodidMatchedSample *matched,
                                  enum NcodidEstimator estimator,
                                  uint32_t nco_years,
                                  double nco_quantile,
                                  int32_t evaluation_year,
                                  size_t replicates,
                                  double level,
                                  uint64_t seed,
                                  struct NcodidEstimate **out);

/**
 * Copy the numbers of an estimate into `out`.
 *
 * # Safety
 * `estimate` must be a live handle; `out` must be writable.
 */
enum NcodidStatus ncodid_estimate_summary(const struct NcodidEstimate *estimate,
                                          struct NcodidSummary *out);

/**
 * Full estimate as JSON; release with [`ncodid_string_free`].
 *
 * # Safety
 * `estimate` must be a live handle; `out` must be writable.
 */
enum NcodidStatus ncodid_estimate_to_json(const struct NcodidEstimate *estimate, char **out);

/**
 * # Safety
 * `estimate` must be null or a handle not yet freed.
 */
void ncodid_estimate_free(struct NcodidEstimate *estimate);

/**
 * # Safety
 * `s` must be null or a string returned by this library, not yet freed.
 */
void ncodid_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NCODID_H */
