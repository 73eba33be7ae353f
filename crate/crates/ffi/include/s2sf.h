#ifndef S2SF_H
#define S2SF_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum S2sfStatus {
  S2SF_STATUS_OK = 0,
  S2SF_STATUS_NULL_POINTER = 1,
  S2SF_STATUS_INVALID_ARGUMENT = 2,
  S2SF_STATUS_FORMAT = 3,
  S2SF_STATUS_IO = 4,
  S2SF_STATUS_NUMERICAL = 5,
  S2SF_STATUS_RUNTIME = 6,
  S2SF_STATUS_PANIC = 7,
} S2sfStatus;

typedef enum S2sfSegment {
  S2SF_SEGMENT_EXO = 0,
  S2SF_SEGMENT_INTERP = 1,
  S2SF_SEGMENT_EGO = 2,
} S2sfSegment;

typedef enum S2sfGuidance {
  S2SF_GUIDANCE_NONE = 0,
  S2SF_GUIDANCE_HG_V = 1,
  S2SF_GUIDANCE_HG_F = 2,
} S2sfGuidance;

/**
 * Opaque synthetic episode.
 */
typedef struct S2sfEpisode S2sfEpisode;

/**
 * Opaque trained denoiser.
 */
typedef struct S2sfModel S2sfModel;

/**
 * Sampling knobs; a zero `steps` keeps the checkpoint's value.
 */
typedef struct S2sfSampleParams {
  enum S2sfGuidance guidance;
  double weight;
  uint32_t steps;
  uint64_t seed;
  bool native_interp;
} S2sfSampleParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null. Owned by the library.
 */
const char *s2sf_last_error(void);

/**
 * Spherical interpolation of unit quaternions `[w, x, y, z]`.
 *
 * # Safety
 * `q0`, `q1` and `out` must each point to 4 doubles.
 */
enum S2sfStatus s2sf_slerp(const double *q0, const double *q1, double tau, double *out);

/**
 * Renders a deterministic episode of `t` frames per segment.
 *
 * # Safety
 * `out` must be a valid pointer to a handle slot.
 */
enum S2sfStatus s2sf_episode_generate(uint64_t seed,
                                      uint32_t t,
                                      uint32_t height,
                                      uint32_t width,
                                      struct S2sfEpisode **out);

/**
 * Frames per segment, channels, height, width.
 *
 * # Safety
 * `ep` must come from `s2sf_episode_generate`; `dims` must point to 4 u32.
 */
enum S2sfStatus s2sf_episode_dims(const struct S2sfEpisode *ep, uint32_t *dims);

/**
 * Borrowed view of one segment's `T x C x H x W` floats in `[0, 1]`.
 * Valid until the episode is freed.
 *
 * # Safety
 * `ep` must be a live handle; `data` and `len` must be valid pointers.
 */
enum S2sfStatus s2sf_episode_frames(const struct S2sfEpisode *ep,
                                    enum S2sfSegment segment,
                                    const float **data,
                                    size_t *len);

/**
 * Writes the episode under `root/episodes/<id>/`.
 *
 * # Safety
 * `ep` must be a live handle; `root` and `id` must be NUL-terminated strings.
 */
enum S2sfStatus s2sf_episode_save(const struct S2sfEpisode *ep, const char *root, const char *id);

/**
 * # Safety
 * `ep` must be null or a handle not yet freed.
 */
void s2sf_episode_free(struct S2sfEpisode *ep);

/**
 * Loads a checkpoint directory (`weights.s2sf` + `meta.json`).
 *
 * # Safety
 * `dir` must be a NUL-terminated string; `out` a valid handle slot.
 */
enum S2sfStatus s2sf_model_load(const char *dir, struct S2sfModel **out);

/**
 * # Safety
 * `model` must be a live handle.
 */
size_t s2sf_model_num_params(const struct S2sfModel *model);

/**
 * Generates transition and ego clips for `ep`.
 *
 * `interp` may be null; otherwise it receives `T*C*H*W` floats, or is left
 * untouched with `*interp_written = false` when the model's recipe has no
 * transition segment. `ego` must hold `T*C*H*W` floats.
 *
 * # Safety
 * All pointers must be valid for the sizes above.
 */
enum S2sfStatus s2sf_model_sample(const struct S2sfModel *model,
                                  const struct S2sfEpisode *ep,
                                  const struct S2sfSampleParams *params,
                                  float *interp,
                                  bool *interp_written,
                                  float *ego,
                                  size_t capacity);

/**
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void s2sf_model_free(struct S2sfModel *model);

/**
 * PSNR in dB of two equally long float arrays, capped at 100.
 *
 * # Safety
 * `a` and `b` must point to `len` floats; `out` to one double.
 */
enum S2sfStatus s2sf_psnr(const float *a, const float *b, size_t len, double peak, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* S2SF_H */
