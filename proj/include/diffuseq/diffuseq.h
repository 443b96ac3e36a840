#ifndef DIFFUSEQ_DIFFUSEQ_H
#define DIFFUSEQ_DIFFUSEQ_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define DSQ_API __declspec(dllexport)
#else
#define DSQ_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum dsq_status {
  DSQ_OK = 0,
  DSQ_ERR_INVALID_ARGUMENT = 1,
  DSQ_ERR_CONFIG = 2,
  DSQ_ERR_IO = 3,
  DSQ_ERR_FORMAT = 4,
  DSQ_ERR_NUMERIC = 5,
  DSQ_ERR_INTERNAL = 6
} dsq_status;

typedef struct dsq_vocab dsq_vocab;
typedef struct dsq_model dsq_model;

/* Message for the last failing call on this thread; never NULL. */
DSQ_API const char* dsq_last_error(void);
DSQ_API const char* dsq_status_name(dsq_status status);

/* Vocabulary */
DSQ_API dsq_status dsq_vocab_build(const char* data_path, size_t vocab_size, dsq_vocab** out);
DSQ_API dsq_status dsq_vocab_load(const char* path, dsq_vocab** out);
DSQ_API dsq_status dsq_vocab_save(const dsq_vocab* vocab, const char* path);
DSQ_API size_t dsq_vocab_size(const dsq_vocab* vocab);
DSQ_API uint64_t dsq_vocab_hash(const dsq_vocab* vocab);
DSQ_API void dsq_vocab_free(dsq_vocab* vocab);

/* Training */
typedef void (*dsq_log_fn)(const char* json_line, void* user);

typedef struct dsq_train_options {
  const char* config_path; /* may be NULL when resuming */
  const char* data_path;
  const char* valid_path; /* optional */
  const char* vocab_path;
  const char* out_dir;
  const char* resume_path; /* optional checkpoint to continue from */
  int has_seed;            /* nonzero: `seed` overrides the config */
  uint64_t seed;
  long stop_after; /* negative: run to the configured step count */
  dsq_log_fn on_log;
  void* user;
} dsq_train_options;

DSQ_API void dsq_train_options_init(dsq_train_options* options);
DSQ_API dsq_status dsq_train(const dsq_train_options* options);

/* Models */
DSQ_API dsq_status dsq_model_load(const char* checkpoint_path, dsq_model** out);
DSQ_API void dsq_model_free(dsq_model* model);
DSQ_API uint64_t dsq_model_vocab_hash(const dsq_model* model);
DSQ_API int dsq_model_diffusion_steps(const dsq_model* model);
DSQ_API long dsq_model_train_step(const dsq_model* model);

typedef struct dsq_sample_options {
  int steps; /* <= 0: the trained step count */
  int candidates;
  int clamp;
  uint64_t seed;
} dsq_sample_options;

DSQ_API void dsq_sample_options_init(dsq_sample_options* options);

/* Reads one source per line (plain text or JSONL with "src") and writes one
 * JSON object per line. `vocab` may be NULL to use the checkpoint's own
 * vocabulary; otherwise its hash must match. */
DSQ_API dsq_status dsq_sample_file(const dsq_model* model, const dsq_vocab* vocab, const char* src_path,
                                   const dsq_sample_options* options, const char* out_path);

/* Evaluation. `tsv_path` may be NULL. */
DSQ_API dsq_status dsq_eval_files(const char* hyp_path, const char* refs_path, const char* report_path,
                                  const char* tsv_path, int keep_case);

/* Synthetic data: task is "copy", "reverse" or "one2many". Writes `count`
 * distinct sources, each `repeats` times with its own target draw, to
 * out_path and, when holdout > 0, one record for each of `holdout` unseen
 * sources to holdout_path. */
DSQ_API dsq_status dsq_gen_synth(const char* task, int count, int repeats, int holdout, uint64_t seed,
                                 const char* out_path, const char* holdout_path);

#ifdef __cplusplus
}
#endif

#endif
