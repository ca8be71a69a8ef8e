#ifndef FLOWSEG_H
#define FLOWSEG_H

/* Generated from the flowseg-ffi crate; regenerated on build, do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Outcome of a call. Nonzero codes match the CLI's exit codes where one
 * exists: 1 generic failure, 2 bad configuration or argument, 3 missing
 * artifact, 4 numeric failure. 5 flags a null pointer handed to a
 * parameter that requires one.
 */
typedef enum FsgStatus {
  FSG_STATUS_OK = 0,
  FSG_STATUS_FAIL = 1,
  FSG_STATUS_CONFIG = 2,
  FSG_STATUS_MISSING_ARTIFACT = 3,
  FSG_STATUS_NUMERIC = 4,
  FSG_STATUS_NULL_ARGUMENT = 5,
} FsgStatus;

/**
 * A run configuration: the same keys the CLI's config file accepts.
 */
typedef struct FsgConfig FsgConfig;

/**
 * The three trained models one fold's segmentation needs.
 */
typedef struct FsgModels FsgModels;

/**
 * A dense float volume with voxel spacing in millimeters.
 */
typedef struct FsgVolume FsgVolume;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Version of the library, as a static string.
 */
const char *fsg_version(void);

/**
 * Message from the most recent failure on the calling thread, or an empty
 * string if nothing failed yet. Borrowed; valid until the next failure on
 * the same thread.
 */
const char *fsg_last_error(void);

/**
 * Release a string this library returned as `char*`. Null is a no-op.
 */
void fsg_string_free(char *s);

/**
 * New configuration holding every default.
 */
struct FsgConfig *fsg_config_new(void);

/**
 * Parse configuration text (`key = value` lines, `#` comments). Returns
 * null and sets the error message on any unknown key, duplicate key, bad
 * value, or cross-field violation.
 */
struct FsgConfig *fsg_config_parse(const char *text);

/**
 * Load and parse a configuration file.
 */
struct FsgConfig *fsg_config_load(const char *path);

/**
 * Set one key to its textual value, e.g. `("data.count", "60")`. Values
 * are checked individually; cross-field rules wait for
 * `fsg_config_validate` so keys can arrive in any order.
 */
enum FsgStatus fsg_config_set(struct FsgConfig *cfg, const char *key, const char *value);

/**
 * Check the cross-field rules (fold counts, guidance window, ranges).
 */
enum FsgStatus fsg_config_validate(const struct FsgConfig *cfg);

/**
 * Canonical text form listing every key. Caller frees with
 * `fsg_string_free`.
 */
char *fsg_config_serialize(const struct FsgConfig *cfg);

/**
 * Release a configuration. Null is a no-op.
 */
void fsg_config_free(struct FsgConfig *cfg);

/**
 * Generate the phantom corpus under the config's output directory.
 * Writes volumes, masks, and the manifest; `out_count`, when non-null,
 * receives the number of volumes generated.
 */
enum FsgStatus fsg_gen_data(const struct FsgConfig *cfg, size_t *out_count);

/**
 * Train the autoencoder for one fold (or materialize the identity latent
 * when `ae.identity` is set). `out_val_mse`, when non-null, receives the
 * final held-out reconstruction MSE.
 */
enum FsgStatus fsg_train_ae(const struct FsgConfig *cfg, size_t fold, float *out_val_mse);

/**
 * Train the latent velocity field for one fold. When non-null,
 * `out_first_loss` and `out_last_loss` receive the first and last
 * smoothed training losses.
 */
enum FsgStatus fsg_train_flow(const struct FsgConfig *cfg,
                              size_t fold,
                              double *out_first_loss,
                              double *out_last_loss);

/**
 * Train the weakly supervised slice classifier for one fold.
 * `out_f1`, when non-null, receives the best held-out slice F1.
 */
enum FsgStatus fsg_train_predictor(const struct FsgConfig *cfg, size_t fold, float *out_f1);

/**
 * Segment volumes with one method: `"tfg"`, `"cam"`, or `"gradcam"`.
 * `fold` and `volume` restrict the work; pass -1 for all. `jobs` caps the
 * worker threads (0 counts as 1). `out_count`, when non-null, receives
 * the number of volumes segmented.
 */
enum FsgStatus fsg_segment(const struct FsgConfig *cfg,
                           const char *method,
                           int64_t fold,
                           int64_t volume,
                           size_t jobs,
                           size_t *out_count);

/**
 * Score stored segmentations against ground truth, writing results.csv,
 * summary.csv, and table.txt under the output directory. `methods` is a
 * comma-separated list; null means `"tfg,cam,gradcam"`. `out_table`, when
 * non-null, receives the rendered table (free with `fsg_string_free`).
 */
enum FsgStatus fsg_eval(const struct FsgConfig *cfg,
                        const char *methods,
                        size_t jobs,
                        char **out_table);

/**
 * Read a `.fsvl` volume file.
 */
struct FsgVolume *fsg_volume_read(const char *path);

/**
 * Write a volume as a `.fsvl` file, creating parent directories.
 */
enum FsgStatus fsg_volume_write(const struct FsgVolume *vol, const char *path);

/**
 * Build a volume from row-major voxels. `dims` and `spacing` point at
 * three values each; `len` must equal `dims[0]*dims[1]*dims[2]`. The
 * voxels are copied.
 */
struct FsgVolume *fsg_volume_create(const size_t *dims,
                                    const float *spacing,
                                    const float *values,
                                    size_t len);

/**
 * Copy the volume's dimensions into `out_dims[3]`.
 */
enum FsgStatus fsg_volume_dims(const struct FsgVolume *vol, size_t *out_dims);

/**
 * Copy the voxel spacing in millimeters into `out_spacing[3]`.
 */
enum FsgStatus fsg_volume_spacing(const struct FsgVolume *vol, float *out_spacing);

/**
 * Number of voxels, or 0 for null.
 */
size_t fsg_volume_len(const struct FsgVolume *vol);

/**
 * Borrowed pointer to the row-major voxels, or null for null. Valid until
 * the volume is freed; nothing in this API mutates a volume in place.
 */
const float *fsg_volume_data(const struct FsgVolume *vol);

/**
 * Release a volume. Null is a no-op.
 */
void fsg_volume_free(struct FsgVolume *vol);

/**
 * Load a fold's trained autoencoder, velocity field, and classifier from
 * the config's output directory. With `ae.identity` set, the autoencoder
 * needs no checkpoint.
 */
struct FsgModels *fsg_models_load(const struct FsgConfig *cfg, size_t fold);

/**
 * Release a model bundle. Null is a no-op.
 */
void fsg_models_free(struct FsgModels *models);

/**
 * Counterfactual segmentation of one volume (display intensity range
 * [0, 255]), using the config's `guidance.*` and `flow.t_steps` keys. Each
 * non-null output receives a new handle the caller frees: `out_mask` the
 * binary mask, `out_counterfactual` the pseudo-healthy reconstruction,
 * `out_residual` the absolute difference the mask is cut from.
 * `out_skipped`, when non-null, is set to true when no slice was
 * predicted positive, in which case the mask comes from the unguided
 * reconstruction alone.
 */
enum FsgStatus fsg_tfg_segment(const struct FsgModels *models,
                               const struct FsgVolume *volume,
                               const struct FsgConfig *cfg,
                               struct FsgVolume **out_mask,
                               struct FsgVolume **out_counterfactual,
                               struct FsgVolume **out_residual,
                               bool *out_skipped);

/**
 * Dice overlap of two binary masks on the same grid (1.0 when both are
 * empty, 0.0 when exactly one is).
 */
enum FsgStatus fsg_dice(const struct FsgVolume *a, const struct FsgVolume *b, double *out);

/**
 * Symmetric mean surface distance in millimeters between two binary
 * masks on the same grid, using the first volume's spacing (0.0 when
 * both are empty; pooled over the diagonal when exactly one is).
 */
enum FsgStatus fsg_mean_surface_distance(const struct FsgVolume *a,
                                         const struct FsgVolume *b,
                                         double *out);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* FLOWSEG_H */
