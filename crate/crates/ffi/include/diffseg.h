/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#ifndef DIFFSEG_H
#define DIFFSEG_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Which part of a dataset an index refers to.
 */
typedef enum DsSplit {
  DS_SPLIT_TRAIN = 0,
  DS_SPLIT_VAL = 1,
} DsSplit;

/**
 * Result of every fallible call.
 */
typedef enum DsStatus {
  DS_STATUS_OK = 0,
  DS_STATUS_NULL_POINTER = 1,
  DS_STATUS_INVALID_UTF8 = 2,
  DS_STATUS_SHAPE = 3,
  DS_STATUS_DATA = 4,
  DS_STATUS_STATE = 5,
  DS_STATUS_CONFIG = 6,
  DS_STATUS_SINGULARITY = 7,
  DS_STATUS_FORMAT = 8,
  DS_STATUS_IO = 9,
  DS_STATUS_BUFFER_TOO_SMALL = 10,
  DS_STATUS_PANIC = 11,
} DsStatus;

/**
 * A generated or loaded dataset.
 */
typedef struct DsDataset DsDataset;

/**
 * A trained denoiser.
 */
typedef struct DsModel DsModel;

/**
 * Training options; start from [`ds_train_options_default`].
 */
typedef struct DsTrainOptions {
  /**
   * 1 to 4 for experiments e1 to e4.
   */
  uint32_t experiment;
  /**
   * 0 concat, 1 encoder_sum, 2 ff_parser.
   */
  uint32_t variant;
  size_t base_channels;
  size_t depth;
  size_t time_embed_dim;
  size_t diffusion_steps;
  double beta_start;
  double beta_end;
  double lr;
  size_t batch_size;
  size_t train_steps;
  uint64_t seed;
} DsTrainOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *ds_version(void);

/**
 * Message of the last failed call on this thread, or NULL after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *ds_last_error(void);

/**
 * Generates `count` synthetic pairs of `kind` ("lesion", "nuclei" or
 * "tumor") at `size`×`size`, split into train/val by `train_ratio`.
 *
 * # Safety
 * `kind` must be a NUL-terminated string and `out` a valid pointer.
 */
enum DsStatus ds_dataset_generate(const char *kind,
                                  size_t count,
                                  size_t size,
                                  uint64_t seed,
                                  double train_ratio,
                                  struct DsDataset **out);

/**
 * Reads a dataset directory of PGM pairs.
 *
 * # Safety
 * `dir` must be a NUL-terminated string and `out` a valid pointer.
 */
enum DsStatus ds_dataset_load(const char *dir, struct DsDataset **out);

/**
 * Writes a dataset as PGM pairs plus a manifest.
 *
 * # Safety
 * `ds` must come from this library; `dir` must be a NUL-terminated string.
 */
enum DsStatus ds_dataset_save(const struct DsDataset *ds, const char *dir);

/**
 * Releases a dataset; NULL is ignored.
 *
 * # Safety
 * `ds` must come from this library and not be used afterwards.
 */
void ds_dataset_free(struct DsDataset *ds);

/**
 * Number of pairs in a split and the side length of every image.
 *
 * # Safety
 * `ds` must come from this library; the out pointers must be valid.
 */
enum DsStatus ds_dataset_info(const struct DsDataset *ds,
                              enum DsSplit split,
                              size_t *out_len,
                              size_t *out_size);

/**
 * Copies the mask (`image == 0`) or condition image (`image != 0`) of one
 * pair into `buf`, row-major; `buf_len` must be at least size².
 *
 * # Safety
 * `ds` must come from this library and `buf` must hold `buf_len` doubles.
 */
enum DsStatus ds_dataset_pixels(const struct DsDataset *ds,
                                enum DsSplit split,
                                size_t index,
                                int32_t image,
                                double *buf,
                                size_t buf_len);

/**
 * Defaults for an experiment number, clamped to 1..=4.
 */
struct DsTrainOptions ds_train_options_default(uint32_t experiment);

/**
 * Trains a model on the dataset's train split.
 *
 * # Safety
 * `ds` must come from this library; `opts` and `out` must be valid.
 */
enum DsStatus ds_train(const struct DsDataset *ds,
                       const struct DsTrainOptions *opts,
                       struct DsModel **out);

/**
 * Loads a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum DsStatus ds_model_load(const char *path, struct DsModel **out);

/**
 * Writes a checkpoint file.
 *
 * # Safety
 * `model` must come from this library; `path` must be a NUL-terminated string.
 */
enum DsStatus ds_model_save(const struct DsModel *model, const char *path);

/**
 * Releases a model; NULL is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void ds_model_free(struct DsModel *model);

/**
 * Diffusion length T and input side length of a model.
 *
 * # Safety
 * `model` must come from this library; the out pointers must be valid.
 */
enum DsStatus ds_model_info(const struct DsModel *model, size_t *out_steps, size_t *out_size);

/**
 * Ensembled mean IoU and pooled ECE of a segmentation model on the val split.
 *
 * # Safety
 * Handles must come from this library; the out pointers must be valid.
 */
enum DsStatus ds_evaluate(const struct DsModel *model,
                          const struct DsDataset *ds,
                          size_t ensemble_n,
                          uint64_t seed,
                          double *out_mean_iou,
                          double *out_ece);

/**
 * Per-timestep mask prediction error on the val split for the grid
 * `t_grid` ("start:end:stride", zero-based). Writes up to `buf_len` values
 * to `values` and `ts`, and the grid length to `out_len`; a short buffer
 * fails with `BufferTooSmall` after setting `out_len`.
 *
 * # Safety
 * Handles must come from this library; `values` and `ts` must hold
 * `buf_len` elements; `t_grid` must be a NUL-terminated string.
 */
enum DsStatus ds_profile_mask_error(const struct DsModel *model,
                                    const struct DsDataset *ds,
                                    const char *t_grid,
                                    int32_t conditioned,
                                    size_t n_eval,
                                    uint64_t seed,
                                    size_t *ts,
                                    double *values,
                                    size_t buf_len,
                                    size_t *out_len);

/**
 * Intersection over union of two binary masks of `len` pixels.
 *
 * # Safety
 * `pred` and `gt` must hold `len` doubles.
 */
enum DsStatus ds_iou(const double *pred, const double *gt, size_t len, double *out);

/**
 * Expected calibration error over ten confidence bins.
 *
 * # Safety
 * `prob` and `gt` must hold `len` doubles.
 */
enum DsStatus ds_ece(const double *prob, const double *gt, size_t len, double *out);

/**
 * Minimum per-pixel squared error for recovering a ±1 pixel with prior
 * `prior_p` of being foreground from √ᾱ·x + √(1−ᾱ)·ε.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum DsStatus ds_bayes_mmse(double prior_p, double alpha_bar, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DIFFSEG_H */
