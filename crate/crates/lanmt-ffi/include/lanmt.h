/* C interface for the lanmt translation library. */

#ifndef LANMT_H
#define LANMT_H

/* Generated by cbindgen from crates/lanmt-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible entry point.
 */
typedef enum {
  /**
   * Success.
   */
  LANMT_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  LANMT_STATUS_NULL_ARGUMENT = 1,
  /**
   * An input string was not valid UTF-8.
   */
  LANMT_STATUS_INVALID_UTF8 = 2,
  /**
   * The requested operation needs a teacher model but the session
   * was opened without one.
   */
  LANMT_STATUS_NO_TEACHER = 3,
  /**
   * Any other failure; details via `lanmt_last_error`.
   */
  LANMT_STATUS_ERROR = 4,
} lanmt_status;

/**
 * Opaque translation session: model, vocabulary, optional teacher.
 */
typedef struct lanmt_session lanmt_session;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent error on this thread, or null if the
 * last call succeeded. Valid until the next library call on the same
 * thread; do not free.
 */
const char *lanmt_last_error(void);

/**
 * Library version as a static NUL-terminated string; do not free.
 */
const char *lanmt_version(void);

/**
 * Opens a session from checkpoint files. `teacher_path` may be null;
 * latent search then becomes unavailable. On success writes the
 * session handle to `out`.
 *
 * # Safety
 * Path arguments must be valid NUL-terminated strings (or null where
 * documented); `out` must be a valid pointer.
 */
lanmt_status lanmt_session_open(const char *model_path,
                                const char *vocab_path,
                                const char *teacher_path,
                                lanmt_session **out);

/**
 * Frees a session. Null is a no-op.
 *
 * # Safety
 * `session` must be a handle from `lanmt_session_open`, not yet closed.
 */
void lanmt_session_close(lanmt_session *session);

/**
 * Translates one whitespace-tokenized source line with deterministic
 * iterative refinement (`steps` = T). Writes a heap string to `out`;
 * free it with `lanmt_string_free`.
 *
 * # Safety
 * `session` must be an open session handle; `source` a valid string;
 * `out` a valid pointer.
 */
lanmt_status lanmt_translate(const lanmt_session *session,
                             const char *source,
                             uintptr_t steps,
                             char **out);

/**
 * Translates one line via latent search: `candidates` prior samples at
 * `temperature`, each refined `steps` iterations, rescored by the
 * teacher. Requires a session opened with a teacher checkpoint.
 *
 * # Safety
 * Same contracts as `lanmt_translate`.
 */
lanmt_status lanmt_latent_search(const lanmt_session *session,
                                 const char *source,
                                 uintptr_t steps,
                                 uintptr_t candidates,
                                 double temperature,
                                 uint64_t seed,
                                 char **out);

/**
 * Frees a string returned by this library. Null is a no-op.
 *
 * # Safety
 * `s` must be a string returned by this library, not yet freed.
 */
void lanmt_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LANMT_H */
