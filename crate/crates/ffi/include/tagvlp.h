#ifndef TAGVLP_H
#define TAGVLP_H

/* Generated by cbindgen. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum TagvlpStatus {
  TAGVLP_STATUS_OK = 0,
  TAGVLP_STATUS_NULL_POINTER = 1,
  TAGVLP_STATUS_INVALID_ARGUMENT = 2,
  TAGVLP_STATUS_PARSE = 3,
  TAGVLP_STATUS_IO = 4,
  TAGVLP_STATUS_SHAPE_MISMATCH = 5,
  TAGVLP_STATUS_NON_FINITE = 6,
  TAGVLP_STATUS_DEGENERATE_EMBEDDING = 7,
  TAGVLP_STATUS_CHECKPOINT = 8,
  TAGVLP_STATUS_METRICS_UNDEFINED = 9,
  TAGVLP_STATUS_BUFFER_TOO_SMALL = 10,
  TAGVLP_STATUS_PANIC = 11,
} TagvlpStatus;

/**
 * Opaque tag lexicon.
 */
typedef struct TagvlpLexicon TagvlpLexicon;

/**
 * Opaque trained model loaded from a checkpoint.
 */
typedef struct TagvlpModel TagvlpModel;

typedef struct TagvlpMetrics {
  double map;
  double cp;
  double cr;
  double cf1;
  double op;
  double or_;
  double of1;
} TagvlpMetrics;

typedef struct TagvlpEncoderConfig {
  size_t image_size;
  size_t patch_size;
  size_t width;
  size_t depth;
  size_t heads;
  size_t mlp_ratio;
} TagvlpEncoderConfig;

typedef struct TagvlpHeadConfig {
  size_t num_classes;
  size_t group_factor;
  /**
   * 0 selects `ceil(num_classes / group_factor)`.
   */
  size_t num_queries;
  size_t decoder_dim;
  size_t decoder_heads;
  size_t ffn_dim;
} TagvlpHeadConfig;

typedef struct TagvlpFlops {
  double encoder_gflops;
  double head_gflops;
  double overhead_percent;
} TagvlpFlops;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread; empty after success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *tagvlp_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *tagvlp_version(void);

/**
 * Load a lexicon file.
 */
enum TagvlpStatus tagvlp_lexicon_load(const char *path, struct TagvlpLexicon **out);

/**
 * Build a lexicon from `n` names and their corpus frequencies.
 */
enum TagvlpStatus tagvlp_lexicon_new(const char *const *names,
                                     const uint64_t *frequencies,
                                     size_t n,
                                     struct TagvlpLexicon **out);

void tagvlp_lexicon_free(struct TagvlpLexicon *lexicon);

/**
 * Number of tags (C).
 */
enum TagvlpStatus tagvlp_lexicon_len(const struct TagvlpLexicon *lexicon, size_t *out);

/**
 * Copy the name of tag `index` into `buf` (NUL-terminated).
 */
enum TagvlpStatus tagvlp_lexicon_name(const struct TagvlpLexicon *lexicon,
                                      size_t index,
                                      char *buf,
                                      size_t buf_len);

/**
 * Write the caption's tag vector (C bytes) into `out_bits`.
 */
enum TagvlpStatus tagvlp_extract_tags(const struct TagvlpLexicon *lexicon,
                                      const char *text,
                                      uint8_t *out_bits,
                                      size_t len);

/**
 * Inverse square-root frequency weights with mean 1.
 */
enum TagvlpStatus tagvlp_class_weights(const struct TagvlpLexicon *lexicon,
                                       double *out,
                                       size_t len);

/**
 * Self-paced loss correction for one sample of `len` classes. Writes the
 * corrected targets and, if `terms_out` is non-null, the per-class log
 * terms.
 */
enum TagvlpStatus tagvlp_splc_correct(const double *probs,
                                      const uint8_t *targets,
                                      size_t len,
                                      double tau,
                                      size_t epoch,
                                      size_t changing_epoch,
                                      uint8_t *corrected_out,
                                      double *terms_out);

/**
 * Batch-mean recognition loss over `batch x classes` logits. `weights` may
 * be null for uniform weights. `grad_out` (same shape as logits) and
 * `pseudo_count_out` may be null.
 */
enum TagvlpStatus tagvlp_mlr_loss(const double *logits,
                                  const uint8_t *targets,
                                  size_t batch,
                                  size_t classes,
                                  const double *weights,
                                  double tau,
                                  size_t epoch,
                                  size_t changing_epoch,
                                  double *loss_out,
                                  double *grad_out,
                                  size_t *pseudo_count_out);

/**
 * Contrastive loss for `m` matched pairs of unit embeddings of width
 * `dim`, with one-hot targets. Gradient buffers may be null.
 */
enum TagvlpStatus tagvlp_itc_loss(const double *z_img,
                                  const double *z_txt,
                                  size_t m,
                                  size_t dim,
                                  double temperature,
                                  double *loss_out,
                                  double *grad_img_out,
                                  double *grad_txt_out);

/**
 * Multi-label metrics for `n x c` probabilities and 0/1 ground truth, as
 * fractions.
 */
enum TagvlpStatus tagvlp_multilabel_metrics(const double *probs,
                                            const uint8_t *truth,
                                            size_t n,
                                            size_t c,
                                            double threshold,
                                            struct TagvlpMetrics *out);

/**
 * Analytic compute estimate (multiply-accumulates, in G).
 */
enum TagvlpStatus tagvlp_flop_estimate(const struct TagvlpEncoderConfig *encoder,
                                       const struct TagvlpHeadConfig *head,
                                       struct TagvlpFlops *out);

/**
 * Load the model stored in a training checkpoint.
 */
enum TagvlpStatus tagvlp_model_load(const char *path, struct TagvlpModel **out);

void tagvlp_model_free(struct TagvlpModel *model);

/**
 * Input side length, joint embedding width and number of tags.
 */
enum TagvlpStatus tagvlp_model_dims(const struct TagvlpModel *model,
                                    size_t *image_size,
                                    size_t *embed_dim,
                                    size_t *num_classes);

/**
 * Unit joint-space embedding of an `height x width x 3` image in `[0,1]`.
 */
enum TagvlpStatus tagvlp_model_encode_image(const struct TagvlpModel *model,
                                            const double *pixels,
                                            size_t height,
                                            size_t width,
                                            double *out,
                                            size_t out_len);

/**
 * Unit joint-space embedding of a text.
 */
enum TagvlpStatus tagvlp_model_encode_text(const struct TagvlpModel *model,
                                           const char *text,
                                           double *out,
                                           size_t out_len);

/**
 * Tag probabilities for one image.
 */
enum TagvlpStatus tagvlp_model_predict_tags(const struct TagvlpModel *model,
                                            const double *pixels,
                                            size_t height,
                                            size_t width,
                                            double *out,
                                            size_t out_len);

/**
 * Project a width-dim encoder output into the joint space (0 = image
 * projector, 1 = text projector).
 */
enum TagvlpStatus tagvlp_model_project(const struct TagvlpModel *model,
                                       uint32_t modality,
                                       const double *v,
                                       size_t len,
                                       double *out,
                                       size_t out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TAGVLP_H */
