/* SPDX-License-Identifier: Apache-2.0 */
/*
 * C interface to libsotsep. Every call returns a status; on failure a
 * message for the calling thread is available from sotsep_last_error()
 * until that thread's next call.
 */

#ifndef SOTSEP_SOTSEP_H
#define SOTSEP_SOTSEP_H

#include <stddef.h>
#include <stdint.h>

#if defined(SOTSEP_BUILDING_LIBRARY)
#define SOTSEP_API __attribute__((visibility("default")))
#else
#define SOTSEP_API
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum sotsep_status {
  SOTSEP_OK = 0,
  SOTSEP_ERR_INVALID_ARGUMENT = 1,
  SOTSEP_ERR_DIMENSION = 2,
  SOTSEP_ERR_INFEASIBLE = 3,
  SOTSEP_ERR_NUMERIC = 4,
  SOTSEP_ERR_IO = 5,
  SOTSEP_ERR_FORMAT = 6,
  SOTSEP_ERR_MISMATCH = 7,
  SOTSEP_ERR_BUFFER_TOO_SMALL = 8,
  SOTSEP_ERR_INTERNAL = 9
} sotsep_status;

typedef struct sotsep_model sotsep_model;

typedef struct sotsep_eval_result {
  double wer;
  size_t substitutions;
  size_t insertions;
  size_t deletions;
  size_t reference_tokens;
  size_t samples;
} sotsep_eval_result;

/* "ok", "invalid_argument", ... */
SOTSEP_API const char* sotsep_status_name(sotsep_status status);
SOTSEP_API const char* sotsep_last_error(void);
SOTSEP_API const char* sotsep_version(void);
/* 0 silent, 1 progress on stderr, 2 chatty. */
SOTSEP_API void sotsep_set_verbosity(int level);

SOTSEP_API sotsep_status sotsep_generate(const char* spec_path, const char* out_dir);

/* init_from may be NULL; it overrides the config's init_from. best_dev_wer
 * may be NULL. */
SOTSEP_API sotsep_status sotsep_train(const char* config_path, const char* out_dir,
                                      const char* init_from, double* best_dev_wer);

/* split is "dev", "eval" or "train". serialized_matching != 0 scores
 * hypothesis streams in serialized order instead of the best permutation.
 * result may be NULL. */
SOTSEP_API sotsep_status sotsep_eval(const char* checkpoint, const char* data_dir,
                                     const char* split, size_t beam, const char* out_csv,
                                     int serialized_matching, sotsep_eval_result* result);

SOTSEP_API sotsep_status sotsep_compare(const char* config_dir, const uint64_t* seeds,
                                        size_t n_seeds, const char* out_csv);

SOTSEP_API sotsep_status sotsep_model_load(const char* path, sotsep_model** out);
SOTSEP_API void sotsep_model_free(sotsep_model* model);
SOTSEP_API sotsep_status sotsep_model_save(const sotsep_model* model, const char* path);
/* Static string, valid for the lifetime of the process. */
SOTSEP_API sotsep_status sotsep_model_variant(const sotsep_model* model, const char** out);
SOTSEP_API sotsep_status sotsep_model_feature_dim(const sotsep_model* model, size_t* out);

/* Decodes a row-major frames x feature_dim array. The hypothesis is written
 * as space-separated tokens with <sc> between speakers. *out_len receives
 * the required size including the terminating NUL; if out_cap is smaller,
 * nothing is written and SOTSEP_ERR_BUFFER_TOO_SMALL is returned. */
SOTSEP_API sotsep_status sotsep_model_decode(const sotsep_model* model, const double* features,
                                             size_t frames, size_t feature_dim, size_t beam,
                                             size_t max_len, char* out, size_t out_cap,
                                             size_t* out_len);

/* hyp and ref are whitespace-separated token strings, speakers separated by
 * <sc>. Any output pointer may be NULL. */
SOTSEP_API sotsep_status sotsep_multispeaker_wer(const char* hyp, const char* ref,
                                                 int serialized_matching, double* wer,
                                                 size_t* errors, size_t* reference_tokens);

/* -log P(target) for a frames x vocab array of log-probabilities, blank id
 * 0. grad (frames x vocab, may be NULL) receives d loss / d log_probs. */
SOTSEP_API sotsep_status sotsep_ctc_loss(const double* log_probs, size_t frames, size_t vocab,
                                         const int32_t* target, size_t target_len,
                                         double* loss, double* grad);

#ifdef __cplusplus
}
#endif

#endif /* SOTSEP_SOTSEP_H */
