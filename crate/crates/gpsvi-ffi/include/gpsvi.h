/* C interface to the gpsvi CTR laboratory. Generated by cbindgen; do not edit. */

#ifndef GPSVI_H
#define GPSVI_H



#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call. Mirrors the CLI exit codes: bad input vs
// runtime failure.
typedef enum GpsviStatus {
  // Success.
  GPSVI_STATUS_OK = 0,
  // Null pointer, malformed UTF-8/JSON, or a config/data validation error.
  GPSVI_STATUS_INVALID_ARGUMENT = 1,
  // Training or evaluation failed after inputs validated (non-finite
  // loss, tensor-engine failure, i/o error, internal panic).
  GPSVI_STATUS_RUNTIME_ERROR = 2,
  // The requested metric has no value (e.g. AUC of a single-class set).
  GPSVI_STATUS_UNDEFINED_METRIC = 3,
} GpsviStatus;

// A loaded or generated dataset.
typedef struct GpsviDataset GpsviDataset;

// A trained model: run configuration, architecture, and parameters.
typedef struct GpsviModel GpsviModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the most recent failure on this thread, or null after a
// success. The pointer is owned by the library and is invalidated by the
// next library call on the same thread.
const char *gpsvi_last_error(void);

// ABI revision; bump on any breaking change to this header.
uint32_t gpsvi_abi_version(void);

// Generate a synthetic dataset from a JSON spec (same schema as the CLI's
// `generate-data` config). On success `*out` owns the new handle.
//
// # Safety
// `synth_json` must be a valid C string and `out` a valid pointer.
enum GpsviStatus gpsvi_dataset_generate(const char *synth_json,
                                        uint64_t seed,
                                        struct GpsviDataset **out);

// Load a JSONL dataset from disk, truncating histories to `max_seq_len`.
// On success `*out` owns the new handle.
//
// # Safety
// `path` must be a valid C string and `out` a valid pointer.
enum GpsviStatus gpsvi_dataset_load(const char *path,
                                    size_t max_seq_len,
                                    struct GpsviDataset **out);

// Number of records in the dataset; 0 for a null handle.
//
// # Safety
// `ds` must be null or a live dataset handle.
size_t gpsvi_dataset_len(const struct GpsviDataset *ds);

// Release a dataset handle. Null is a no-op.
//
// # Safety
// `ds` must be null or a live dataset handle; it is dead afterwards.
void gpsvi_dataset_free(struct GpsviDataset *ds);

// Train per a run-config JSON (same schema as the CLI's `train` config;
// synthetic and file-backed data sources both work). Returns the first
// repeat's trained model. On success `*out` owns the new handle.
//
// # Safety
// `config_json` must be a valid C string and `out` a valid pointer.
enum GpsviStatus gpsvi_train(const char *config_json, struct GpsviModel **out);

// Reload a trained model from a checkpoint plus its `run_config.json`
// sidecar; `data` supplies the vocabulary, exactly as for evaluation.
// On success `*out` owns the new handle.
//
// # Safety
// Both paths must be valid C strings, `data` a live dataset handle, and
// `out` a valid pointer.
enum GpsviStatus gpsvi_model_load(const char *checkpoint_path,
                                  const char *run_config_path,
                                  const struct GpsviDataset *data,
                                  struct GpsviModel **out);

// Write `checkpoint.json` and `run_config.json` into `dir` (created if
// missing) so the CLI's `evaluate` and `report` commands can consume them.
//
// # Safety
// `model` must be a live model handle and `dir` a valid C string.
enum GpsviStatus gpsvi_model_save(const struct GpsviModel *model, const char *dir);

// Release a model handle. Null is a no-op.
//
// # Safety
// `model` must be null or a live model handle; it is dead afterwards.
void gpsvi_model_free(struct GpsviModel *model);

// Segment-wise AUC of `model` on `data`, using the model's configured
// head/tail quantile and scoring mode. Each non-null output receives the
// AUC, or NaN when that segment has only one class. Output pointers may be
// null to skip a segment.
//
// # Safety
// `model` and `data` must be live handles; non-null outputs must be valid.
enum GpsviStatus gpsvi_evaluate(const struct GpsviModel *model,
                                const struct GpsviDataset *data,
                                double *auc_all,
                                double *auc_head,
                                double *auc_tail);

// Click probabilities for every record of `data`, written to `out` (length
// `len`, which must equal the dataset length). Deterministic mean-path
// scoring unless the model was configured for Monte Carlo evaluation.
//
// # Safety
// `model` and `data` must be live handles; `out` must point to `len`
// writable doubles.
enum GpsviStatus gpsvi_scores(const struct GpsviModel *model,
                              const struct GpsviDataset *data,
                              double *out,
                              size_t len);

// Area under the ROC curve with exact tie handling. `labels` are 0/1.
// Returns `GPSVI_STATUS_UNDEFINED_METRIC` when only one class is present.
//
// # Safety
// `scores` and `labels` must point to `n` readable elements; `out` must be
// a valid pointer.
enum GpsviStatus gpsvi_auc(const double *scores, const uint8_t *labels, size_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GPSVI_H */
