#ifndef SPATROB_H
#define SPATROB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result codes.
 */
typedef enum SpatrobStatus {
  SPATROB_STATUS_OK = 0,
  SPATROB_STATUS_NULL_POINTER = 1,
  SPATROB_STATUS_INVALID_INPUT = 2,
  SPATROB_STATUS_IO = 3,
  /*
   Malformed dataset or checkpoint file.
   */
  SPATROB_STATUS_FORMAT = 4,
  /*
   An output buffer is too small; the required size was reported where applicable.
   */
  SPATROB_STATUS_BUFFER_TOO_SMALL = 5,
  /*
   Internal failure; the library state is unaffected.
   */
  SPATROB_STATUS_PANIC = 6,
} SpatrobStatus;

/*
 Opaque labeled image collection.
 */
typedef struct SpatrobDataset SpatrobDataset;

/*
 Opaque trained or freshly initialized classifier.
 */
typedef struct SpatrobNet SpatrobNet;

/*
 Admissible transform box and grid resolution. Grid counts must be odd.
 */
typedef struct SpatrobAttackSpace {
  double max_trans;
  double max_rot;
  size_t trans_grid_points;
  size_t rot_grid_points;
} SpatrobAttackSpace;

/*
 Borrowed image view.
 */
typedef struct SpatrobImage {
  size_t channels;
  size_t height;
  size_t width;
  const double *data;
} SpatrobImage;

/*
 Result of a spatial attack on one example. `theta` is in degrees.
 */
typedef struct SpatrobOutcome {
  bool fooled;
  double du;
  double dv;
  double theta;
  double best_loss;
  size_t adversarial_prediction;
  size_t queries_used;
} SpatrobOutcome;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message for the last failure on this thread, or null if none. Valid until the next call
 into this library on the same thread.
 */
const char *spatrob_last_error(void);

/*
 The default MNIST space: ±3 px, ±30°, 5×5×31 grid.
 */
struct SpatrobAttackSpace spatrob_attack_space_mnist(void);

/*
 Builds the MNIST architecture with seeded random weights.

 # Safety
 `out` must be valid for writing one pointer.
 */
enum SpatrobStatus spatrob_net_build_mnist(uint64_t seed, struct SpatrobNet **out);

/*
 Loads a checkpoint file.

 # Safety
 `path` must be a NUL-terminated string; `out` must be valid for writing one pointer.
 */
enum SpatrobStatus spatrob_net_load(const char *path, struct SpatrobNet **out);

/*
 Writes a checkpoint file.

 # Safety
 `net` must come from this library; `path` must be a NUL-terminated string.
 */
enum SpatrobStatus spatrob_net_save(const struct SpatrobNet *net, const char *path);

/*
 # Safety
 `net` must be null or a handle from this library that has not been freed.
 */
void spatrob_net_free(struct SpatrobNet *net);

/*
 Number of output classes, or 0 for a null handle.

 # Safety
 `net` must be null or a live handle.
 */
size_t spatrob_net_num_classes(const struct SpatrobNet *net);

/*
 Writes the logits for one image into `out` (capacity `out_len`, at least the class count).

 # Safety
 `image` must describe a readable buffer; `out` must be writable for `out_len` doubles.
 */
enum SpatrobStatus spatrob_net_logits(const struct SpatrobNet *net,
                                      const struct SpatrobImage *image,
                                      double *out,
                                      size_t out_len);

/*
 Predicted class (argmax of logits, ties to the lowest index).

 # Safety
 As [`spatrob_net_logits`]; `out_class` must be writable.
 */
enum SpatrobStatus spatrob_net_predict(const struct SpatrobNet *net,
                                       const struct SpatrobImage *image,
                                       size_t *out_class);

/*
 Rotates by `theta` degrees (counter-clockwise) and translates by `(du, dv)` pixels, with
 bilinear sampling and zero fill. `out` must hold as many doubles as the input.

 # Safety
 `image` must describe a readable buffer; `out` must be writable for the same length.
 */
enum SpatrobStatus spatrob_apply_transform(const struct SpatrobImage *image,
                                           double du,
                                           double dv,
                                           double theta,
                                           double *out,
                                           size_t out_len);

/*
 Exhaustive grid attack (no early exit).

 # Safety
 Pointers must be valid as described on the types.
 */
enum SpatrobStatus spatrob_grid_attack(const struct SpatrobNet *net,
                                       const struct SpatrobImage *image,
                                       size_t label,
                                       const struct SpatrobAttackSpace *space,
                                       struct SpatrobOutcome *out);

/*
 Worst of `k` uniform samples from the continuous box.

 # Safety
 Pointers must be valid as described on the types.
 */
enum SpatrobStatus spatrob_worst_of_k(const struct SpatrobNet *net,
                                      const struct SpatrobImage *image,
                                      size_t label,
                                      const struct SpatrobAttackSpace *space,
                                      size_t k,
                                      uint64_t seed,
                                      struct SpatrobOutcome *out);

/*
 Loads an IDX images/labels pair (gzip detected automatically).

 # Safety
 Paths must be NUL-terminated strings; `out` must be valid for writing one pointer.
 */
enum SpatrobStatus spatrob_dataset_load_idx(const char *images_path,
                                            const char *labels_path,
                                            struct SpatrobDataset **out);

/*
 Number of examples, or 0 for a null handle.

 # Safety
 `ds` must be null or a live handle.
 */
size_t spatrob_dataset_len(const struct SpatrobDataset *ds);

/*
 Copies example `index` into `pixels` (capacity `pixels_len`) and writes its label and shape.
 Any of `label`, `channels`, `height`, `width` may be null.

 # Safety
 `pixels` must be writable for `pixels_len` doubles; other out-pointers null or writable.
 */
enum SpatrobStatus spatrob_dataset_get(const struct SpatrobDataset *ds,
                                       size_t index,
                                       double *pixels,
                                       size_t pixels_len,
                                       size_t *label,
                                       size_t *channels,
                                       size_t *height,
                                       size_t *width);

/*
 # Safety
 `ds` must be null or a handle from this library that has not been freed.
 */
void spatrob_dataset_free(struct SpatrobDataset *ds);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SPATROB_H */
