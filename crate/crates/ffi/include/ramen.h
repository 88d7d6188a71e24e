#ifndef RAMEN_H
#define RAMEN_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum RamenStatus {
  RAMEN_STATUS_OK = 0,
  RAMEN_STATUS_NULL_ARGUMENT = 1,
  RAMEN_STATUS_CONFIG = 2,
  RAMEN_STATUS_DATA = 3,
  RAMEN_STATUS_NUMERIC = 4,
  RAMEN_STATUS_CHECKPOINT = 5,
  RAMEN_STATUS_IO = 6,
  RAMEN_STATUS_INVALID_UTF8 = 7,
  // The call panicked; the handle it was given may be unusable.
  RAMEN_STATUS_PANIC = 8,
} RamenStatus;

// A question-answer corpus with its scenes.
typedef struct RamenDataset RamenDataset;

// A trained model loaded from a checkpoint, with its answer vocabulary.
typedef struct RamenModelHandle RamenModelHandle;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. Valid until
// the next call into this library on the same thread.
const char *ramen_last_error(void);

// Short fixed description of a status code; never null.
const char *ramen_status_name(enum RamenStatus status);

// Learning rate of a 1-based epoch under the default schedule.
double ramen_lr_at_epoch(uint32_t epoch);

// Generates a corpus. `config_json` holds a data configuration object
// (null for the defaults).
//
// # Safety
// `config_json` is null or a valid string; `out` is writable.
enum RamenStatus ramen_dataset_generate(const char *config_json, struct RamenDataset **out);

// Reads a corpus directory written by `gen-data` or
// [`ramen_dataset_write`].
//
// # Safety
// `dir` is a valid string; `out` is writable.
enum RamenStatus ramen_dataset_read(const char *dir, struct RamenDataset **out);

// # Safety
// `dataset` is a live handle; `dir` is a valid string.
enum RamenStatus ramen_dataset_write(const struct RamenDataset *dataset, const char *dir);

// Number of question-answer items; 0 for a null handle.
//
// # Safety
// `dataset` is null or a live handle.
uintptr_t ramen_dataset_num_items(const struct RamenDataset *dataset);

// Number of scenes; 0 for a null handle.
//
// # Safety
// `dataset` is null or a live handle.
uintptr_t ramen_dataset_num_scenes(const struct RamenDataset *dataset);

// Number of items whose stored answer disagrees with the answer oracle.
//
// # Safety
// `dataset` is a live handle; `out_mismatches` is writable.
enum RamenStatus ramen_dataset_validate(const struct RamenDataset *dataset,
                                        uintptr_t *out_mismatches);

// # Safety
// `dataset` is null or a handle from this library, not used afterwards.
void ramen_dataset_free(struct RamenDataset *dataset);

// Loads a checkpoint written by `train`, in evaluation mode.
//
// # Safety
// `path` is a valid string; `out` is writable.
enum RamenStatus ramen_model_load(const char *path, struct RamenModelHandle **out);

// Size of the answer vocabulary; 0 for a null handle.
//
// # Safety
// `model` is null or a live handle.
uintptr_t ramen_model_num_answers(const struct RamenModelHandle *model);

// Width of one region vector the model expects (visual + spatial).
//
// # Safety
// `model` is null or a live handle.
uintptr_t ramen_model_region_dim(const struct RamenModelHandle *model);

// Answer string for an index; null when out of range. Owned by the
// handle.
//
// # Safety
// `model` is null or a live handle.
const char *ramen_model_answer(const struct RamenModelHandle *model, uintptr_t index);

// Answers one question about one image. `regions` holds `num_regions`
// row-major vectors of the model's region width. The question is
// lowercased and `?` dropped before tokenizing.
//
// # Safety
// `model` is a live handle; `regions` points to
// `num_regions * region_dim` floats; `question` is a valid string;
// `out_index` is writable.
enum RamenStatus ramen_model_predict(const struct RamenModelHandle *model,
                                     const float *regions,
                                     uintptr_t num_regions,
                                     const char *question,
                                     uintptr_t *out_index);

// # Safety
// `model` is null or a handle from this library, not used afterwards.
void ramen_model_free(struct RamenModelHandle *model);

// Trains one model as the `train` command does, writing checkpoints, the
// learning curve and `report.json` to `out_dir`. `out_best_val` (may be
// null) receives the best validation accuracy.
//
// # Safety
// `config_json` is null or a valid string holding a run configuration;
// `out_dir` is a valid string; `out_best_val` is null or writable.
enum RamenStatus ramen_train(const char *config_json, const char *out_dir, double *out_best_val);

// Finite-difference check of every op and model gradient. `out_passed`
// receives 1 when every check passed, else 0; `out_worst` (may be null)
// the largest relative error seen.
//
// # Safety
// `out_passed` is writable; `out_worst` is null or writable.
enum RamenStatus ramen_grad_check(uint64_t seed, int32_t *out_passed, double *out_worst);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RAMEN_H */
