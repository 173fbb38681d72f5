#ifndef IMSIM_H
#define IMSIM_H

/* Generated by cbindgen from imsim-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible entry point.
 */
typedef enum ImsimStatus {
  /**
   * The call succeeded; for runs, every expectation passed.
   */
  IMSIM_STATUS_OK = 0,
  /**
   * The run finished but at least one expectation failed.
   */
  IMSIM_STATUS_EXPECT_FAILED = 1,
  /**
   * The scenario could not be parsed or validated.
   */
  IMSIM_STATUS_LOAD_ERROR = 2,
  /**
   * A required pointer argument was null.
   */
  IMSIM_STATUS_NULL_ARGUMENT = 3,
  /**
   * A string argument was not valid UTF-8.
   */
  IMSIM_STATUS_INVALID_UTF8 = 4,
} ImsimStatus;

/**
 * Opaque run report handle.
 */
typedef struct ImsimReport ImsimReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * # Safety
 * `text` must be a valid NUL-terminated string; `out_report` must be a
 * valid writable pointer. On `Ok`/`ExpectFailed` the caller owns the
 * report written to `out_report`.
 */
enum ImsimStatus imsim_run_text(const char *text, uint64_t seed, struct ImsimReport **out_report);

/**
 * Parses and reference-checks a scenario without running it.
 *
 * # Safety
 * `text` must be a valid NUL-terminated string.
 */
enum ImsimStatus imsim_validate_text(const char *text);

/**
 * Exit code of the run: 0 all expectations passed, 1 otherwise.
 *
 * # Safety
 * `report` must be a live handle from [`imsim_run_text`].
 */
int32_t imsim_report_exit_code(const struct ImsimReport *report);

/**
 * The rendered event trace. Caller frees via [`imsim_string_free`].
 *
 * # Safety
 * `report` must be a live handle from [`imsim_run_text`].
 */
char *imsim_report_trace(const struct ImsimReport *report);

/**
 * The charging record dump. Caller frees via [`imsim_string_free`].
 *
 * # Safety
 * `report` must be a live handle from [`imsim_run_text`].
 */
char *imsim_report_cdr(const struct ImsimReport *report);

/**
 * Number of expectations the scenario declared.
 *
 * # Safety
 * `report` must be a live handle from [`imsim_run_text`].
 */
uintptr_t imsim_report_expect_count(const struct ImsimReport *report);

/**
 * One expectation result as `PASS <desc>` or `FAIL <desc>: <detail>`.
 * Returns null when the index is out of range; caller frees the string.
 *
 * # Safety
 * `report` must be a live handle from [`imsim_run_text`].
 */
char *imsim_report_expect_line(const struct ImsimReport *report, uintptr_t index);

/**
 * Last load error on this thread, or null. Caller frees the string.
 */
char *imsim_last_error(void);

/**
 * Crate version as a static string; do not free.
 */
const char *imsim_version(void);

/**
 * Releases a report handle.
 *
 * # Safety
 * `report` must come from [`imsim_run_text`] and not be freed twice.
 */
void imsim_report_free(struct ImsimReport *report);

/**
 * Releases a string returned by this library.
 *
 * # Safety
 * `s` must come from an imsim-ffi function that transfers ownership and
 * not be freed twice.
 */
void imsim_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* IMSIM_H */
