#ifndef PARIC_H
#define PARIC_H

/* Generated by cbindgen; do not edit. */

#include <stddef.h>
#include <stdint.h>

/*
 Result code of every exported function.
 */
typedef enum ParicStatus {
  PARIC_STATUS_OK = 0,
  PARIC_STATUS_NULL_POINTER = 1,
  PARIC_STATUS_CONTRACT = 2,
  PARIC_STATUS_NUMERIC = 3,
  PARIC_STATUS_CONFIG = 4,
  PARIC_STATUS_FORMAT = 5,
  PARIC_STATUS_IO = 6,
  PARIC_STATUS_INVALID_UTF8 = 7,
  PARIC_STATUS_BUFFER_TOO_SMALL = 8,
  PARIC_STATUS_PANIC = 9,
} ParicStatus;

/*
 Reference-map aggregation selector.
 */
typedef enum ParicAggregation {
  PARIC_AGGREGATION_MEAN = 0,
  PARIC_AGGREGATION_MEDIAN = 1,
} ParicAggregation;

/*
 Attention-pooling classifier.
 */
typedef struct ParicClassifier ParicClassifier;

/*
 Frozen image/text encoder.
 */
typedef struct ParicEncoder ParicEncoder;

/*
 Validated experiment configuration.
 */
typedef struct ParicExperiment ParicExperiment;

/*
 Message of the last failure on this thread, or null. Owned by the
 library; valid until the next failing call on the thread.
 */
const char *paric_last_error(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *paric_version(void);

/*
 Pretrains (or fetches from the in-process cache) the frozen encoder with
 the default configuration, keyed by `name`.

 # Safety
 `name` must be a NUL-terminated string; `out` must be writable.
 */
enum ParicStatus paric_encoder_new(const char *name, struct ParicEncoder **out);

/*
 Loads frozen weights saved in the checkpoint format.

 # Safety
 `name` and `path` must be NUL-terminated strings; `out` must be writable.
 */
enum ParicStatus paric_encoder_load(const char *name, const char *path, struct ParicEncoder **out);

/*
 # Safety
 `enc` must be null or a handle from this library, not yet freed.
 */
void paric_encoder_free(struct ParicEncoder *enc);

/*
 # Safety
 `enc` must be a live handle; `path` a NUL-terminated string.
 */
enum ParicStatus paric_encoder_save(const struct ParicEncoder *enc, const char *path);

/*
 Embedding dimension, or 0 for a null handle.

 # Safety
 `enc` must be null or a live handle.
 */
size_t paric_encoder_embed_dim(const struct ParicEncoder *enc);

/*
 Image embedding into `out_z` (capacity `cap`).

 # Safety
 `pixels` must hold `height * width * 3` values; `out_z` must hold `cap`.
 */
enum ParicStatus paric_encoder_encode_image(const struct ParicEncoder *enc,
                                            const double *pixels,
                                            size_t height,
                                            size_t width,
                                            double *out_z,
                                            size_t cap);

/*
 Embedding of the prompt "a photo of {category}".

 # Safety
 `category` must be NUL-terminated; `out_z` must hold `cap` values.
 */
enum ParicStatus paric_encoder_encode_text(const struct ParicEncoder *enc,
                                           const char *category,
                                           double *out_z,
                                           size_t cap);

/*
 Normalised Grad-CAM map of `Ψ_I(x) · Ψ_T(prompt)` at the encoder's
 feature resolution. `out_h`/`out_w` receive the map size.

 # Safety
 Pointer arguments must be valid for the stated sizes.
 */
enum ParicStatus paric_encoder_saliency(const struct ParicEncoder *enc,
                                        const double *pixels,
                                        size_t height,
                                        size_t width,
                                        const char *category,
                                        double *out_map,
                                        size_t cap,
                                        size_t *out_h,
                                        size_t *out_w);

/*
 Fresh classifier with seeded weights for `[height, width, 3]` images.

 # Safety
 `out` must be writable.
 */
enum ParicStatus paric_classifier_new(size_t num_classes,
                                      size_t height,
                                      size_t width,
                                      uint64_t seed_value,
                                      struct ParicClassifier **out);

/*
 # Safety
 `cls` must be null or a live handle.
 */
void paric_classifier_free(struct ParicClassifier *cls);

/*
 # Safety
 `cls` must be a live handle; `path` NUL-terminated.
 */
enum ParicStatus paric_classifier_load_weights(struct ParicClassifier *cls, const char *path);

/*
 # Safety
 `cls` must be a live handle; `path` NUL-terminated.
 */
enum ParicStatus paric_classifier_save(const struct ParicClassifier *cls, const char *path);

/*
 Class probabilities (`num_classes` values) and the `[height][width]`
 attention map.

 # Safety
 Pointer arguments must be valid for the stated capacities.
 */
enum ParicStatus paric_classifier_forward(const struct ParicClassifier *cls,
                                          const double *pixels,
                                          size_t height,
                                          size_t width,
                                          double *out_probs,
                                          size_t probs_cap,
                                          double *out_attention,
                                          size_t attention_cap);

/*
 One optimizer step on a single-example batch with reference map `a_ref`
 (`ref_h × ref_w`). Writes `{cls, att, total}` to `out_loss`.

 # Safety
 Pointer arguments must be valid for the stated sizes; `out_loss` holds 3.
 */
enum ParicStatus paric_classifier_train_step(struct ParicClassifier *cls,
                                             const double *pixels,
                                             size_t height,
                                             size_t width,
                                             size_t label,
                                             const double *a_ref,
                                             size_t ref_h,
                                             size_t ref_w,
                                             double lambda,
                                             double lr,
                                             double *out_loss);

/*
 Per-pixel aggregation of `k` maps of `height × width` stored back to
 back in `maps`. Writes the reference map and the uncertainty map.

 # Safety
 `maps` must hold `k * height * width` values; outputs hold `height * width`.
 */
enum ParicStatus paric_aggregate(const double *maps,
                                 size_t k,
                                 size_t height,
                                 size_t width,
                                 enum ParicAggregation method,
                                 double *out_values,
                                 double *out_uncertainty);

/*
 Log-density of `z` under a per-dimension generalized Gaussian.

 # Safety
 All arrays must hold `dim` values; `out` must be writable.
 */
enum ParicStatus paric_ggd_logpdf(const double *mu,
                                  const double *alpha,
                                  const double *beta,
                                  const double *z,
                                  size_t dim,
                                  double *out);

/*
 Histogram Jensen–Shannon divergence (natural log) of two score lists.

 # Safety
 `a` and `b` must hold `na` and `nb` values; `out` must be writable.
 */
enum ParicStatus paric_outcome_divergence(const double *a,
                                          size_t na,
                                          const double *b,
                                          size_t nb,
                                          size_t bins,
                                          double *out);

/*
 Parses and validates an experiment configuration from JSON text.

 # Safety
 `json` must be NUL-terminated; `out` must be writable.
 */
enum ParicStatus paric_experiment_from_json(const char *json, struct ParicExperiment **out);

/*
 # Safety
 `exp` must be null or a live handle.
 */
void paric_experiment_free(struct ParicExperiment *exp);

/*
 Runs the four-arm comparison and writes `metrics.csv`, `record.json`
 and checkpoints under `out_dir`.

 # Safety
 `exp` must be a live handle; `out_dir` NUL-terminated.
 */
enum ParicStatus paric_experiment_compare(const struct ParicExperiment *exp, const char *out_dir);

#endif  /* PARIC_H */
