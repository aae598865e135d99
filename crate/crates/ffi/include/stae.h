#ifndef STAE_H
#define STAE_H

/* Generated by cbindgen from the stae-ffi crate; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

#define STAE_OK 0

/**
 * The call was rejected before touching any data (bad argument or geometry).
 */
#define STAE_ERR_USAGE 2

/**
 * A file or its contents could not be used.
 */
#define STAE_ERR_DATA 3

/**
 * A computation produced a non-finite or otherwise unusable result.
 */
#define STAE_ERR_NUMERIC 4

/**
 * A required pointer was null.
 */
#define STAE_ERR_NULL -1

/**
 * An internal invariant failed; the library state is still consistent.
 */
#define STAE_ERR_PANIC -2

/**
 * A loaded or generated traffic series.
 */
typedef struct StaeDataset StaeDataset;

/**
 * A trained model together with its input scaler.
 */
typedef struct StaeModel StaeModel;

/**
 * Copies the message from the most recent failure on this thread into
 * `buf` (NUL-terminated, truncated to `cap` bytes) and returns the full
 * message length in bytes, excluding the NUL. `buf` may be null when
 * `cap` is zero.
 */
uintptr_t stae_last_error_message(char *buf, uintptr_t cap);

/**
 * Returns the library version as a static NUL-terminated string.
 */
const char *stae_version(void);

/**
 * Generates a seeded synthetic series; see the CLI `gen-data` command for
 * the meaning of the knobs. On success stores a new handle in `*out`.
 */
int stae_dataset_generate(uint64_t seed,
                          uintptr_t nodes,
                          uintptr_t steps,
                          uintptr_t clusters,
                          double noise_std,
                          StaeDataset **out);

/**
 * Loads a `.stts` series from `path` into a new handle at `*out`.
 */
int stae_dataset_load(const char *path, StaeDataset **out);

/**
 * Writes the series to `path` in `.stts` form (atomically).
 */
int stae_dataset_save(const StaeDataset *ds, const char *path);

/**
 * Number of sensors in the series; zero when `ds` is null.
 */
uintptr_t stae_dataset_nodes(const StaeDataset *ds);

/**
 * Number of time steps in the series; zero when `ds` is null.
 */
uintptr_t stae_dataset_steps(const StaeDataset *ds);

/**
 * Releases a dataset handle. Null is ignored.
 */
void stae_dataset_free(StaeDataset *ds);

/**
 * Loads a checkpoint written by the CLI `train` command. `prefix` is the
 * path without the `.manifest`/`.blob` suffix.
 */
int stae_checkpoint_load(const char *prefix, StaeModel **out);

/**
 * Total number of trainable values; zero when `model` is null.
 */
uintptr_t stae_model_parameter_count(const StaeModel *model);

/**
 * Input window length in frames; zero when `model` is null.
 */
uintptr_t stae_model_input_len(const StaeModel *model);

/**
 * Prediction length in frames; zero when `model` is null.
 */
uintptr_t stae_model_output_len(const StaeModel *model);

/**
 * Number of sensors the model was trained on; zero when `model` is null.
 */
uintptr_t stae_model_nodes(const StaeModel *model);

/**
 * Releases a model handle. Null is ignored.
 */
void stae_model_free(StaeModel *model);

/**
 * Predicts from the input window starting at step `start` of the series and
 * writes `output_len * nodes` readings (horizon-major, original units) into
 * `out`. `out_len` must be at least that product.
 */
int stae_predict(const StaeModel *model,
                 const StaeDataset *ds,
                 uintptr_t start,
                 double *out,
                 uintptr_t out_len);

/**
 * Evaluates the model over every window of the series and writes the
 * horizon-averaged masked errors to the non-null out-parameters.
 */
int stae_evaluate(const StaeModel *model,
                  const StaeDataset *ds,
                  double *mae,
                  double *rmse,
                  double *mape);

#endif  /* STAE_H */
