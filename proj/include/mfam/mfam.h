/* C interface to the mfam library: wearable time-series classification with
 * frequency-band decomposition, attention-based multi-instance aggregation
 * and adversarial subject-invariance training.
 *
 * All functions return MFAM_OK on success; on failure they return an error
 * status and leave a message retrievable via mfam_last_error(). Strings
 * returned through char** out-parameters are owned by the caller and must be
 * released with mfam_string_free().
 */
#ifndef MFAM_H
#define MFAM_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#ifndef MFAM_API
#define MFAM_API __attribute__((visibility("default")))
#endif

typedef enum mfam_status {
  MFAM_OK = 0,
  MFAM_ERROR_INVALID_ARGUMENT = 1,
  MFAM_ERROR_SHAPE = 2,
  MFAM_ERROR_DOMAIN = 3,
  MFAM_ERROR_FORMAT = 4,
  MFAM_ERROR_LENGTH = 5,
  MFAM_ERROR_INDEX = 6,
  MFAM_ERROR_CONFIG = 7,
  MFAM_ERROR_IO = 8,
  MFAM_ERROR_NUMERIC = 9,
  MFAM_ERROR_CONTRACT = 10,
  MFAM_ERROR_INTERNAL = 11
} mfam_status;

MFAM_API const char* mfam_status_name(mfam_status status);

/* Message for the most recent failure on this thread; empty string if none. */
MFAM_API const char* mfam_last_error(void);

MFAM_API const char* mfam_version(void);

/* Opaque handles. */
typedef struct mfam_dataset mfam_dataset;
typedef struct mfam_model mfam_model;

MFAM_API void mfam_string_free(char* s);
MFAM_API void mfam_dataset_free(mfam_dataset* ds);
MFAM_API void mfam_model_free(mfam_model* m);

/* ---- datasets ----------------------------------------------------------- */

/* Generates a synthetic burst dataset from a JSON spec ("{}" for defaults). */
MFAM_API mfam_status mfam_dataset_synth(const char* spec_json, uint64_t seed,
                                        mfam_dataset** out);

/* Loads a dataset from a manifest.csv path or a directory containing one. */
MFAM_API mfam_status mfam_dataset_load(const char* path, mfam_dataset** out);

/* Writes recordings/, manifest.csv and bursts.csv under dir. */
MFAM_API mfam_status mfam_dataset_save(const mfam_dataset* ds, const char* dir);

MFAM_API mfam_status mfam_dataset_summary(const mfam_dataset* ds, char** json_out);

/* ---- models ------------------------------------------------------------- */

MFAM_API mfam_status mfam_model_load(const char* checkpoint_path, mfam_model** out);
MFAM_API mfam_status mfam_model_save(const mfam_model* m, const char* checkpoint_path);

/* Trains one model on the dataset with a fixed subject-level train/val
 * split derived from the run seed. run_config_json may be "{}" for defaults.
 * history_csv_path is optional (NULL to skip writing the epoch history). */
MFAM_API mfam_status mfam_train(const char* run_config_json, const mfam_dataset* ds,
                                const char* history_csv_path, mfam_model** out);

/* Subject-level k-fold cross-validation over one activity. Writes per-fold
 * checkpoints and history CSVs into out_dir when it is non-NULL; always
 * returns the metrics JSON. jobs > 1 trains folds in parallel with identical
 * results. */
MFAM_API mfam_status mfam_cross_validate(const char* run_config_json, const mfam_dataset* ds,
                                         int folds, int jobs, const char* out_dir,
                                         char** metrics_json_out);

/* Metrics of the model on every bag of the dataset, as JSON. */
MFAM_API mfam_status mfam_evaluate(const mfam_model* m, const mfam_dataset* ds,
                                   char** metrics_json_out);

/* Attention explanation for one recording CSV: per-instance rows plus a
 * header comment with the predicted class and probabilities. */
MFAM_API mfam_status mfam_explain(const mfam_model* m, const char* recording_csv_path,
                                  char** csv_out);

/* Frequency decomposition of one recording CSV into per-band CSV files under
 * out_dir; returns the energy-summary CSV. bands_json may be NULL for the
 * default tremor bands. */
MFAM_API mfam_status mfam_decompose(const char* recording_csv_path, const char* bands_json,
                                    const char* out_dir, char** energy_summary_out);

#ifdef __cplusplus
}
#endif

#endif /* MFAM_H */
