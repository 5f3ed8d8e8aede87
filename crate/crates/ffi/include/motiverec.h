#ifndef MOTIVEREC_H
#define MOTIVEREC_H

/* Generated by cbindgen from motiverec-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result discriminant shared by every fallible call.
 */
typedef enum MrStatus {
  MR_OK = 0,
  MR_INVALID_ARGUMENT = 1,
  MR_NOT_FOUND = 2,
  MR_IO = 3,
  MR_INTERNAL = 4,
} MrStatus;

/*
 Text/embedding backend selector for `mr_engine_open`.
 */
typedef enum MrBackend {
  /*
   Deterministic in-process backend; no network.
   */
  MR_BACKEND_MOCK = 0,
  /*
   HTTP backend configured through MOTIVEREC_* environment variables.
   */
  MR_BACKEND_HTTP = 1,
} MrBackend;

/*
 Opaque engine handle; create with `mr_engine_open`, release with
 `mr_engine_close`.
 */
typedef struct MrEngine MrEngine;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Library version as a static string; do not free.
 */
const char *mr_version_string(void);

/*
 Status of the most recent call on this thread.
 */
enum MrStatus mr_last_status(void);

/*
 Message for the most recent failure on this thread, or null when the last
 call succeeded. The caller owns the string; release with `mr_string_free`.
 */
char *mr_last_error_message(void);

/*
 Releases a string returned by this library. Null is a no-op.

 # Safety
 `s` must be null or a pointer previously returned by this library and not
 yet freed.
 */
void mr_string_free(char *s);

/*
 Validates a JSON pipeline configuration (null means the defaults).
 Returns `MR_OK` or `MR_INVALID_ARGUMENT` with the message available via
 `mr_last_error_message`.

 # Safety
 `config_json` must be null or a valid NUL-terminated string.
 */
enum MrStatus mr_config_validate(const char *config_json);

/*
 Opens an engine over a prepared artifact directory (the ingest, augment,
 and annotate stages must have run). `config_json` may be null for the
 default configuration; it must match the configuration the artifacts were
 built with where dimensions matter. Returns null on failure.

 # Safety
 `config_json` and `artifacts_dir` must be null or valid NUL-terminated
 strings; `artifacts_dir` must not be null.
 */
struct MrEngine *mr_engine_open(const char *config_json,
                                const char *artifacts_dir,
                                enum MrBackend backend,
                                uint64_t seed,
                                uint32_t jobs);

/*
 Recommends for one user; `query` is an optional explicit request. Returns
 a JSON recommendation record (ranking, query plan, motive selection, and
 per-iteration audits) or null on failure — an unknown user sets
 `MR_NOT_FOUND`.

 # Safety
 `engine` must be a live handle from `mr_engine_open`; `user_id` must be a
 valid NUL-terminated string; `query` may be null.
 */
char *mr_engine_recommend_json(const struct MrEngine *engine,
                               const char *user_id,
                               const char *query);

/*
 Runs batch recommendation over every user and scores it against the test
 split. Returns the evaluation result as JSON (macro metrics keyed
 `"recall@10"` style, per-user breakdown, population counts) or null on
 failure.

 # Safety
 `engine` must be a live handle from `mr_engine_open`.
 */
char *mr_engine_evaluate_json(const struct MrEngine *engine);

/*
 Releases an engine handle. Null is a no-op.

 # Safety
 `engine` must be null or a handle from `mr_engine_open` not yet closed.
 */
void mr_engine_close(struct MrEngine *engine);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MOTIVEREC_H */
