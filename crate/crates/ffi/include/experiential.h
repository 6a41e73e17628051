#ifndef EXPERIENTIAL_H
#define EXPERIENTIAL_H

#pragma once

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes.
typedef enum ExpStatus {
  EXP_STATUS_OK = 0,
  EXP_STATUS_NULL_ARGUMENT = 1,
  EXP_STATUS_INVALID_UTF8 = 2,
  // A precondition or configuration value was violated.
  EXP_STATUS_INVALID_ARGUMENT = 3,
  // Input could not be parsed or failed validation.
  EXP_STATUS_INVALID_DATA = 4,
  EXP_STATUS_IO = 5,
  // An insight operation was rejected; the set is unchanged.
  EXP_STATUS_REJECTED = 6,
  EXP_STATUS_OUT_OF_RANGE = 7,
  EXP_STATUS_INTERNAL = 8,
} ExpStatus;

// A task-description index together with the hash embedder that built it.
typedef struct ExpIndex ExpIndex;

// An insight set with its audit log.
typedef struct ExpInsights ExpInsights;

// An experience pool.
typedef struct ExpPool ExpPool;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or null. The pointer is
// valid until the next call into the library on this thread.
const char *exp_last_error(void);

// Library version as a static string.
const char *exp_version(void);

// Releases a string returned by this library. Null is ignored.
//
// # Safety
// `s` must come from this library and not have been freed.
void exp_string_free(char *s);

// Reads a pool file (one JSON trajectory per line).
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum ExpStatus exp_pool_load(const char *path, struct ExpPool **out);

// Number of trajectories, or 0 for a null handle.
//
// # Safety
// `pool` must be null or a live pool handle.
size_t exp_pool_len(const struct ExpPool *pool);

// Number of successful trajectories, counting manual demonstrations when asked.
//
// # Safety
// `pool` must be null or a live pool handle.
size_t exp_pool_success_count(const struct ExpPool *pool, bool include_manual);

// The trajectory at `index` as a JSON string.
//
// # Safety
// `pool` must be a live pool handle; `out` must be writable.
enum ExpStatus exp_pool_trajectory_json(const struct ExpPool *pool, size_t index, char **out);

// # Safety
// `pool` must be null or a handle not yet freed.
void exp_pool_free(struct ExpPool *pool);

// An empty insight set.
struct ExpInsights *exp_insights_new(void);

// Reads an insight file; its audit log must replay to the stored insights.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum ExpStatus exp_insights_load(const char *path, struct ExpInsights **out);

// # Safety
// `set` must be a live handle; `path` a NUL-terminated string.
enum ExpStatus exp_insights_save(const struct ExpInsights *set, const char *path);

// Applies one operation given as JSON, e.g. `{"op":"add","text":"..."}` or
// `{"op":"upvote","id":1}`. A rejected operation leaves the set unchanged.
//
// # Safety
// `set` must be a live handle; `op_json` a NUL-terminated string.
enum ExpStatus exp_insights_apply(struct ExpInsights *set, const char *op_json);

// Number of live insights, or 0 for a null handle.
//
// # Safety
// `set` must be null or a live handle.
size_t exp_insights_len(const struct ExpInsights *set);

// Importance of the insight with stable id `id`; 0 when it does not exist.
//
// # Safety
// `set` must be null or a live handle.
uint32_t exp_insights_importance(const struct ExpInsights *set, uint32_t id);

// The numbered listing shown to models.
//
// # Safety
// `set` must be a live handle; `out` must be writable.
enum ExpStatus exp_insights_render(const struct ExpInsights *set, char **out);

// The set, with its audit log, as JSON.
//
// # Safety
// `set` must be a live handle; `out` must be writable.
enum ExpStatus exp_insights_to_json(const struct ExpInsights *set, char **out);

// # Safety
// `set` must be null or a handle not yet freed.
void exp_insights_free(struct ExpInsights *set);

// Indexes the task descriptions of the pool's successes with a hash embedder.
//
// # Safety
// `pool` must be a live handle; `out` must be writable.
enum ExpStatus exp_index_build(const struct ExpPool *pool,
                               size_t dimension,
                               uint64_t seed,
                               bool include_manual,
                               struct ExpIndex **out);

// Reads an index file built with a hash embedder using `seed`.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum ExpStatus exp_index_load(const char *path, uint64_t seed, struct ExpIndex **out);

// # Safety
// `index` must be a live handle; `path` a NUL-terminated string.
enum ExpStatus exp_index_save(const struct ExpIndex *index, const char *path);

// Number of indexed entries, or 0 for a null handle.
//
// # Safety
// `index` must be null or a live handle.
size_t exp_index_len(const struct ExpIndex *index);

// Top-`k` pool positions by inner product with the embedding of `query`,
// best first. Writes at most `capacity` results and their count to `out_count`.
// `out_scores` may be null.
//
// # Safety
// `index` must be a live handle; `query` a NUL-terminated string; the output
// arrays must hold `capacity` elements.
enum ExpStatus exp_index_query(const struct ExpIndex *index,
                               const char *query,
                               size_t k,
                               uint64_t *out_pool_indices,
                               double *out_scores,
                               size_t capacity,
                               size_t *out_count);

// # Safety
// `index` must be null or a handle not yet freed.
void exp_index_free(struct ExpIndex *index);

// Shop reward of a purchased item against a goal, both given as JSON.
//
// # Safety
// Both strings must be NUL-terminated; `out_reward` must be writable.
enum ExpStatus exp_shop_reward(const char *purchased_json,
                               const char *goal_json,
                               double *out_reward);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EXPERIENTIAL_H */
