/* C interface to the prompt-editing library. All handles are opaque; every
 * fallible call returns a pe_status and leaves a message for pe_last_error(). */
#ifndef PROMPTEDIT_H
#define PROMPTEDIT_H

#include <stddef.h>

#ifdef __cplusplus
extern "C" {
#endif

#if defined(_WIN32)
#define PE_API __declspec(dllexport)
#else
#define PE_API __attribute__((visibility("default")))
#endif

typedef enum pe_status {
  PE_OK = 0,
  PE_ERR_INVALID_INSTRUCTION = 1,
  PE_ERR_RENDER_OVERFLOW = 2,
  PE_ERR_INVALID_ACTION = 3,
  PE_ERR_INVALID_CONFIG = 4,
  PE_ERR_INVALID_TASK = 5,
  PE_ERR_SCORER_UNAVAILABLE = 6,
  PE_ERR_PROTOCOL = 7,
  PE_ERR_EPISODE_FINISHED = 8,
  PE_ERR_SHAPE = 9,
  PE_ERR_NO_ACTIONS = 10,
  PE_ERR_NO_TAPE = 11,
  PE_ERR_NON_FINITE_LOSS = 12,
  PE_ERR_INSUFFICIENT_DATA = 13,
  PE_ERR_CONFIG_MISMATCH = 14,
  PE_ERR_EMPTY_SPLIT = 15,
  PE_ERR_IO = 16,
  PE_ERR_INVALID_ARGUMENT = 100,
  PE_ERR_INTERNAL = 101
} pe_status;

typedef struct pe_session pe_session;

PE_API const char* pe_version(void);
PE_API const char* pe_status_string(pe_status status);
/* Message of the last failed call on this thread; "" if none. */
PE_API const char* pe_last_error(void);

/* Strings returned through char** out-parameters are owned by the caller. */
PE_API void pe_string_free(char* s);

/* Resolved defaults for every run-config key, as JSON. */
PE_API pe_status pe_default_config(char** out_json);

/* Builds task, splits, pool, scorer and environment from a JSON run config
 * (NULL or "" means all defaults). */
PE_API pe_status pe_session_create(const char* config_json, pe_session** out);
PE_API void pe_session_destroy(pe_session* session);
PE_API pe_status pe_session_config(const pe_session* session, char** out_json);

PE_API pe_status pe_session_train(pe_session* session, const char* out_dir, char** out_summary);
PE_API pe_status pe_session_evaluate(pe_session* session, const char* checkpoint,
                                     const char* out_dir, char** out_summary);
/* kind: "no-edit", "random-edit" or "greedy-edit". */
PE_API pe_status pe_session_baseline(pe_session* session, const char* kind, const char* out_dir,
                                     char** out_summary);
/* checkpoint may be NULL to show only the initial prompt. */
PE_API pe_status pe_session_inspect(pe_session* session, const char* query,
                                    const char* checkpoint, char** out_json);

/* Closed-form action counts for l phrases, n slots, pool N and V verbalizers. */
PE_API pe_status pe_count_actions(size_t l, size_t n, size_t pool, size_t verbalizers,
                                  size_t* instruction, size_t* exemplar, size_t* verbalizer);

/* lambda1 * log p[correct] - lambda2 * max over the other labels. */
PE_API pe_status pe_compute_score(const double* log_probs, size_t num_labels, size_t correct,
                                  double lambda1, double lambda2, double* out);

#ifdef __cplusplus
}
#endif

#endif
