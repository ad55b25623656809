/* Stable C interface to the stydesty library. */
#ifndef STYDESTY_H
#define STYDESTY_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define STYDESTY_API __declspec(dllexport)
#else
#define STYDESTY_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

/* Status codes double as process exit codes. */
typedef enum stydesty_status {
  STYDESTY_OK = 0,
  STYDESTY_CHECK_FAILED = 1,
  STYDESTY_CONFIG_ERROR = 2, /* bad config, bad argument, missing or mismatched input */
  STYDESTY_RUNTIME_ERROR = 3 /* training abort or I/O failure */
} stydesty_status;

typedef struct stydesty_config stydesty_config;

STYDESTY_API const char* stydesty_version(void);

/* Message of the last failing call on this thread; never NULL. */
STYDESTY_API const char* stydesty_last_error(void);

/* Caps BLAS and data-generation threads. n <= 0 re-reads STYDESTY_THREADS. */
STYDESTY_API int stydesty_set_threads(int n);

/* Strings returned through char** out-parameters are owned by the caller. */
STYDESTY_API void stydesty_free_string(char* s);

STYDESTY_API int stydesty_config_load(const char* path, stydesty_config** out);
STYDESTY_API int stydesty_config_parse(const char* toml_text, stydesty_config** out);
STYDESTY_API void stydesty_config_free(stydesty_config* cfg);
STYDESTY_API int stydesty_config_set_seed(stydesty_config* cfg, uint64_t seed);
/* Formal-stage outer iteration cap (0 = run all epochs). */
STYDESTY_API int stydesty_config_set_max_iters(stydesty_config* cfg, int iters);
STYDESTY_API int stydesty_config_set_nas_max_iters(stydesty_config* cfg, int iters);
STYDESTY_API int stydesty_config_enable_ablation(stydesty_config* cfg, const char* name);
/* 16 hex digits plus terminator; buf must hold at least 17 bytes. */
STYDESTY_API int stydesty_config_hash(const stydesty_config* cfg, char* buf, size_t len);
STYDESTY_API int stydesty_config_to_json(const stydesty_config* cfg, char** json_out);

/* Each command writes manifest.json to out_dir before it starts and
 * finalizes it on exit. `command_line` is recorded verbatim. */

/* NAS, formal training and evaluation. Writes report.json, nas.json,
 * train_log.csv and checkpoints/ under out_dir. */
STYDESTY_API int stydesty_train(const stydesty_config* cfg, const char* out_dir, const char* command_line,
                                char** report_json);
/* NAS stage only; writes nas.json. */
STYDESTY_API int stydesty_nas(const stydesty_config* cfg, const char* out_dir, const char* command_line,
                              char** nas_json);
/* Evaluates checkpoints in checkpoint_dir on the config's suite; writes
 * report.json when out_dir is non-empty. */
STYDESTY_API int stydesty_eval(const stydesty_config* cfg, const char* checkpoint_dir, const char* out_dir,
                               const char* command_line, char** report_json);
/* Writes n (original, stylized) PPM pairs drawn from the source test split. */
STYDESTY_API int stydesty_stylize(const stydesty_config* cfg, const char* checkpoint_dir, int n, uint64_t seed,
                                  const char* out_dir, const char* command_line);

/* Finite-difference suite. scope: "all", "ops", "composites" or one op or
 * composite name. inject_fault may be NULL. Returns STYDESTY_CHECK_FAILED when
 * any row fails. */
STYDESTY_API int stydesty_gradcheck(const char* scope, const char* inject_fault, uint64_t seed, char** table,
                                    char** report_json);

#ifdef __cplusplus
}
#endif

#endif
