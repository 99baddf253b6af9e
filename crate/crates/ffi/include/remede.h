#ifndef REMEDE_H
#define REMEDE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum RemedeStatus {
  REMEDE_STATUS_OK = 0,
  REMEDE_STATUS_NULL_POINTER = 1,
  REMEDE_STATUS_INVALID_ARGUMENT = 2,
  REMEDE_STATUS_IO = 3,
  REMEDE_STATUS_PARSE = 4,
  REMEDE_STATUS_TRAINING = 5,
  REMEDE_STATUS_PANIC = 6,
} RemedeStatus;

/**
 * In-memory dataset.
 */
typedef struct RemedeDataset RemedeDataset;

/**
 * Trained model.
 */
typedef struct RemedeModel RemedeModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread; empty after success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *remede_last_error(void);

/**
 * Generates `n_sequences` sequences of `task` (`"poc1"` .. `"poc5"`) with
 * the default task parameters.
 *
 * # Safety
 * `task` must be a NUL-terminated string and `out` a valid pointer.
 */
enum RemedeStatus remede_dataset_generate(const char *task,
                                          uint64_t seed,
                                          size_t n_sequences,
                                          struct RemedeDataset **out);

/**
 * Reads a JSONL dataset.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum RemedeStatus remede_dataset_load(const char *path, struct RemedeDataset **out);

/**
 * Number of sequences; 0 for a null handle.
 *
 * # Safety
 * `dataset` must be null or a live handle.
 */
size_t remede_dataset_len(const struct RemedeDataset *dataset);

/**
 * # Safety
 * `dataset` must be null or a handle not freed before.
 */
void remede_dataset_free(struct RemedeDataset *dataset);

/**
 * Splits `dataset` 80/20 by `seed`, trains a depth-6 tree with a
 * five-dimensional memory on the training part and returns the model.
 * `test_accuracy` (optional) receives the held-out accuracy.
 *
 * # Safety
 * `dataset` must be a live handle, `out` a valid pointer and
 * `test_accuracy` null or valid.
 */
enum RemedeStatus remede_model_train(const struct RemedeDataset *dataset,
                                     double learning_rate,
                                     uint64_t seed,
                                     size_t max_epochs,
                                     struct RemedeModel **out,
                                     double *test_accuracy);

/**
 * Reads a JSON checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum RemedeStatus remede_model_load(const char *path, struct RemedeModel **out);

/**
 * Writes the model as a JSON checkpoint.
 *
 * # Safety
 * `model` must be a live handle and `path` a NUL-terminated string.
 */
enum RemedeStatus remede_model_save(const struct RemedeModel *model, const char *path);

/**
 * Input width the model expects.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t remede_model_input_dim(const struct RemedeModel *model);

/**
 * Predicts targets in `{-1, 0, 1}` for one sequence of `len` steps stored
 * row-major in `inputs` (`len * n_x` values). Writes `len` values to
 * `targets`.
 *
 * # Safety
 * `inputs` must hold `len * n_x` doubles and `targets` room for `len` bytes.
 */
enum RemedeStatus remede_model_predict(const struct RemedeModel *model,
                                       const double *inputs,
                                       size_t len,
                                       size_t n_x,
                                       int8_t *targets);

/**
 * Elementwise accuracy of the model over `dataset`.
 *
 * # Safety
 * Handles must be live and `accuracy` valid.
 */
enum RemedeStatus remede_model_evaluate(const struct RemedeModel *model,
                                        const struct RemedeDataset *dataset,
                                        double *accuracy);

/**
 * Node count of the tree pruned against `dataset`.
 *
 * # Safety
 * Handles must be live and `size` valid.
 */
enum RemedeStatus remede_model_pruned_size(const struct RemedeModel *model,
                                           const struct RemedeDataset *dataset,
                                           size_t *size);

/**
 * # Safety
 * `model` must be null or a handle not freed before.
 */
void remede_model_free(struct RemedeModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* REMEDE_H */
