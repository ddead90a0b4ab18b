/* C interface to the jmvar library. Every call returns a jmvar_status; on
 * failure jmvar_last_error() on the same context describes it. Strings
 * handed out by the library are released with jmvar_string_free. */
#ifndef JMVAR_H
#define JMVAR_H

#ifdef __cplusplus
extern "C" {
#endif

#if defined(__GNUC__)
#define JMVAR_API __attribute__((visibility("default")))
#else
#define JMVAR_API
#endif

typedef enum jmvar_status {
  JMVAR_OK = 0,
  JMVAR_E_INVALID_ARGUMENT = 1,
  JMVAR_E_IO = 2,
  JMVAR_E_SCHEMA = 3,
  JMVAR_E_VALIDATION = 4,
  JMVAR_E_CONFIG = 5,
  JMVAR_E_NUMERIC = 6,
  JMVAR_E_CONVERGENCE = 7,
  JMVAR_E_SAMPLER = 8,
  JMVAR_E_TIMEOUT = 9,
  JMVAR_E_INTERNAL = 10,
  JMVAR_E_CANCELLED = 11
} jmvar_status;

/* Holds the last error and a cancellation flag. A context may be used by
 * one call at a time; jmvar_cancel may be called from any thread. */
typedef struct jmvar_context jmvar_context;

/* Called once per finished replicate with a JSON record of it. */
typedef void (*jmvar_progress_fn)(const char* replicate_json, void* user);

JMVAR_API jmvar_context* jmvar_context_new(void);
JMVAR_API void jmvar_context_free(jmvar_context* ctx);

/* Requests a running call to stop; it returns JMVAR_E_CANCELLED. */
JMVAR_API void jmvar_cancel(jmvar_context* ctx);

/* JSON record {"code", "status", "message", "fields"} of the last failure,
 * or NULL. Owned by the context and valid until its next call. */
JMVAR_API const char* jmvar_last_error(const jmvar_context* ctx);
JMVAR_API const char* jmvar_status_name(jmvar_status status);

JMVAR_API void jmvar_string_free(char* s);

/* Library and dependency versions as JSON. */
JMVAR_API jmvar_status jmvar_version(jmvar_context* ctx, char** out_json);

/* Completes and validates a config. kind is "scenario", "sampler" or
 * "study"; the input may name a preset. Writes the full config JSON. */
JMVAR_API jmvar_status jmvar_config_normalize(jmvar_context* ctx, const char* kind, const char* config_json,
                                              char** out_json);
/* Hash of the normalized config (parallelism excluded). */
JMVAR_API jmvar_status jmvar_config_hash(jmvar_context* ctx, const char* kind, const char* config_json,
                                         char** out_hash);

/* 64-bit FNV-1a of arbitrary text as 16 hex digits. */
JMVAR_API jmvar_status jmvar_hash_text(jmvar_context* ctx, const char* text, char** out_hash);

/* Each run writes into out_dir through a staging directory; nothing is left
 * behind on failure. out_json receives a summary of the run (may be NULL). */
JMVAR_API jmvar_status jmvar_simulate(jmvar_context* ctx, const char* scenario_json, const char* out_dir,
                                      char** out_json);

/* request: {"data", "schema", "outcome", "model", "method"} */
JMVAR_API jmvar_status jmvar_fit_lmm(jmvar_context* ctx, const char* request_json, const char* out_dir,
                                     char** out_json);

/* request: {"data", "schema", "lmm", "residual", "spec", "quad_nodes",
 * "sampler", "keep_chains", "timeout_min"} */
JMVAR_API jmvar_status jmvar_fit_joint(jmvar_context* ctx, const char* request_json, const char* out_dir,
                                       char** out_json);

JMVAR_API jmvar_status jmvar_run_study(jmvar_context* ctx, const char* study_json, const char* out_dir,
                                       jmvar_progress_fn progress, void* user, char** out_json);

/* Summary CSV recomputed from a study directory. A NaN threshold keeps the
 * configured one. */
JMVAR_API jmvar_status jmvar_summarize(jmvar_context* ctx, const char* study_dir, double rhat_threshold,
                                       char** out_csv);

/* request: {"kind", "truth", "fit", "scenario", "subjects", "points"} */
JMVAR_API jmvar_status jmvar_plot_data(jmvar_context* ctx, const char* request_json, char** out_csv);

#ifdef __cplusplus
}
#endif

#endif
