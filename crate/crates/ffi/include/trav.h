#ifndef TRAV_H
#define TRAV_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  TRAV_STATUS_OK = 0,
  TRAV_STATUS_NULL_POINTER = 1,
  TRAV_STATUS_INVALID_INPUT = 2,
  TRAV_STATUS_INVALID_CONFIG = 3,
  TRAV_STATUS_INVALID_EDGE = 4,
  TRAV_STATUS_NO_PATH = 5,
  TRAV_STATUS_DEGENERATE = 6,
  TRAV_STATUS_MISSING_ARTIFACT = 7,
  TRAV_STATUS_IO = 8,
  TRAV_STATUS_INTERNAL = 9,
  TRAV_STATUS_PANIC = 10,
} trav_status;

// Elevation grid handed to the planner.
typedef struct trav_map trav_map;

// Planned path.
typedef struct trav_path trav_path;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. Valid until the
// next failing call on the same thread.
const char *trav_last_error(void);

// New map with every cell unobserved, height 0 and traversability 0.
//
// # Safety
// `out` must be a valid pointer to writable storage for one handle.
trav_status trav_map_new(size_t rows, size_t cols, double resolution, trav_map **out);

// Loads a map directory written by `trav map`.
//
// # Safety
// `dir` must be a NUL-terminated string; `out` a valid handle slot.
trav_status trav_map_read(const char *dir, trav_map **out);

// # Safety
// `map` must come from `trav_map_new`/`trav_map_read` and not be used afterwards. Null is ignored.
void trav_map_free(trav_map *map);

// # Safety
// `map` must be a live handle.
trav_status trav_map_set_cell(trav_map *map,
                              size_t row,
                              size_t col,
                              double height,
                              double traversability,
                              bool observed);

// Cost of the edge between two adjacent observed cells.
//
// # Safety
// `map` must be a live handle and `out` writable.
trav_status trav_edge_cost(const trav_map *map,
                           size_t r0,
                           size_t c0,
                           size_t r1,
                           size_t c1,
                           double w_trav,
                           double *out);

// Minimum-cost path. An unreachable goal returns the no-path status and leaves
// `*out` null.
//
// # Safety
// `map` must be a live handle and `out` a valid handle slot.
trav_status trav_plan(const trav_map *map,
                      size_t start_row,
                      size_t start_col,
                      size_t goal_row,
                      size_t goal_col,
                      double w_trav,
                      trav_path **out);

// # Safety
// `path` must come from `trav_plan` and not be used afterwards. Null is ignored.
void trav_path_free(trav_path *path);

// Number of cells in the path; 0 for null.
//
// # Safety
// `path` must be null or a live handle.
size_t trav_path_len(const trav_path *path);

// Total cost and 3D length.
//
// # Safety
// `path` must be a live handle; `cost` and `length` writable.
trav_status trav_path_summary(const trav_path *path, double *cost, double *length);

// Copies the path's cells into `rows`/`cols`, each of capacity `cap`.
//
// # Safety
// `path` must be a live handle; `rows` and `cols` must hold `cap` elements.
trav_status trav_path_cells(const trav_path *path, size_t *rows, size_t *cols, size_t cap);

// Farthest-point selection of `k` rows of the `n × dim` row-major
// `features`; indices are written to `out` in selection order.
//
// # Safety
// `features` must hold `n * dim` values and `out` room for `k` indices.
trav_status trav_fps_select(const double *features, size_t n, size_t dim, size_t k, size_t *out);

// Traversability score of `latent` against `reference`: cosine rescaled to `[0, 1]`.
//
// # Safety
// Both vectors must hold `dim` values; `out` must be writable.
trav_status trav_score(const double *reference, const double *latent, size_t dim, double *out);

// Runs every pipeline stage into `out_dir`. `config_path` may be null to
// use `profile` ("default" or "fast"; null means "default").
//
// # Safety
// Non-null pointers must be NUL-terminated strings.
trav_status trav_run_pipeline(const char *config_path, const char *profile, const char *out_dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TRAV_H */
