#ifndef CAPMESH_H
#define CAPMESH_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every call.
typedef enum CapmeshStatus {
  CAPMESH_STATUS_OK = 0,
  // A null pointer, invalid UTF-8 or malformed JSON argument.
  CAPMESH_STATUS_INVALID_ARGUMENT = 1,
  // The named task, directory or scenario does not exist.
  CAPMESH_STATUS_NOT_FOUND = 2,
  // Discovery found no tool scoring above the threshold.
  CAPMESH_STATUS_NO_TOOL = 3,
  // The task produced no result in time.
  CAPMESH_STATUS_TIMEOUT = 4,
  // The runtime reported an error; see the last error message.
  CAPMESH_STATUS_FAILED = 5,
  // A panic was caught at the boundary.
  CAPMESH_STATUS_PANIC = 6,
} CapmeshStatus;

// A stack, the runtime that drives it and its broker heartbeat loop.
typedef struct CapmeshStack CapmeshStack;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *capmesh_version(void);

// Message of the last failed call on this thread, or null. Owned by the library.
const char *capmesh_last_error_message(void);

// Frees a string returned by this library. Null is ignored.
//
// # Safety
// `s` must come from this library and not have been freed.
void capmesh_string_free(char *s);

// Creates an in-process stack from a TOML configuration, or the shipped one
// when `config_path` is null.
//
// # Safety
// `config_path` is null or a NUL-terminated string; `out` is writable.
enum CapmeshStatus capmesh_stack_new(const char *config_path, struct CapmeshStack **out);

// Stops the stack and releases it. Null is ignored.
//
// # Safety
// `stack` comes from [`capmesh_stack_new`] and is not used afterwards.
void capmesh_stack_free(struct CapmeshStack *stack);

// Seeds the shipped demo fixtures, or the seed directory at `dir` when it is
// not null. Writes the item counts as JSON to `out_json` when not null.
//
// # Safety
// `stack` is a live handle; `dir` is null or NUL-terminated; `out_json` is
// null or writable.
enum CapmeshStatus capmesh_seed(const struct CapmeshStack *stack, const char *dir, char **out_json);

// Submits a free-text request; writes the new task id to `out_task_id`.
//
// # Safety
// `stack` is a live handle; `user_id` and `request` are NUL-terminated;
// `out_task_id` is writable.
enum CapmeshStatus capmesh_submit(const struct CapmeshStack *stack,
                                  const char *user_id,
                                  const char *request,
                                  char **out_task_id);

// Waits up to `timeout_ms` for the task result; writes it as JSON.
//
// # Safety
// `stack` is a live handle; `task_id` is NUL-terminated; `out_json` is writable.
enum CapmeshStatus capmesh_wait_result(const struct CapmeshStack *stack,
                                       const char *task_id,
                                       uint64_t timeout_ms,
                                       char **out_json);

// Runs a discovery query given as JSON; writes the result as JSON.
//
// # Safety
// `stack` is a live handle; `query_json` is NUL-terminated; `out_json` is writable.
enum CapmeshStatus capmesh_discover(const struct CapmeshStack *stack,
                                    const char *query_json,
                                    char **out_json);

// Replays demo scenario `n` (1 to 3) on a fresh stack with a mock clock and
// writes its normalized transcript.
//
// # Safety
// `out_transcript` is writable.
enum CapmeshStatus capmesh_run_scenario(uint8_t n, char **out_transcript);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CAPMESH_H */
