#ifndef LGPT_H
#define LGPT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes mirroring the CLI exit codes.
 */
typedef enum {
  LGPT_STATUS_OK = 0,
  /**
   * Assertion-style failure.
   */
  LGPT_STATUS_FAILED = 1,
  /**
   * Bad arguments, config, or state.
   */
  LGPT_STATUS_INVALID = 2,
  /**
   * File or checkpoint I/O failure.
   */
  LGPT_STATUS_IO = 3,
  /**
   * Internal panic caught at the boundary.
   */
  LGPT_STATUS_PANIC = 4,
} LgptStatus;

/**
 * Opaque codec handle (config + trained state).
 */
typedef struct LgptCodec LgptCodec;

/**
 * Opaque language-model handle.
 */
typedef struct LgptLm LgptLm;

/**
 * Opaque vocoder handle.
 */
typedef struct LgptVocoder LgptVocoder;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copy the last error message (UTF-8, NUL-terminated) into `buf`.
 * Returns the full message length in bytes, excluding the terminator.
 */
uintptr_t lgpt_last_error_message(char *buf, uintptr_t cap);

/**
 * Open a codec from a config file and checkpoint.
 *
 * # Safety
 * `config_path`/`ckpt_path` must be NUL-terminated strings and `out` a
 * valid pointer; the handle must be released with `lgpt_codec_free`.
 */
LgptStatus lgpt_codec_open(const char *config_path, const char *ckpt_path, LgptCodec **out);

/**
 * # Safety
 * `handle` must come from `lgpt_codec_open` and not be used afterwards.
 */
void lgpt_codec_free(LgptCodec *handle);

/**
 * Latent frame count for a sample count (ceil(samples/frame)).
 *
 * # Safety
 * `handle` must be a live codec handle.
 */
uintptr_t lgpt_codec_frame_count(const LgptCodec *handle, uintptr_t samples);

/**
 * # Safety
 * `handle` must be a live codec handle.
 */
uintptr_t lgpt_codec_num_quantizers(const LgptCodec *handle);

/**
 * Encode mono f32 samples in [-1,1] into codec codes for the first
 * `groups` quantizers. `codes` must hold frame_count·groups entries,
 * written frame-major.
 *
 * # Safety
 * `samples` must point to `num_samples` floats and `codes` to
 * `lgpt_codec_frame_count(...)·groups` u16 slots.
 */
LgptStatus lgpt_codec_encode(const LgptCodec *handle,
                             const float *samples,
                             uintptr_t num_samples,
                             uintptr_t groups,
                             uint16_t *codes);

/**
 * Decode codec codes back to audio. `samples` must hold frames·640 f32.
 *
 * # Safety
 * `codes` must point to `frames·groups` u16 and `samples` to
 * `frames·frame_samples` f32 slots.
 */
LgptStatus lgpt_codec_decode(const LgptCodec *handle,
                             const uint16_t *codes,
                             uintptr_t frames,
                             uintptr_t groups,
                             float *samples);

/**
 * # Safety
 * As for `lgpt_codec_open`.
 */
LgptStatus lgpt_vocoder_open(const char *config_path, const char *ckpt_path, LgptVocoder **out);

/**
 * # Safety
 * `handle` must come from `lgpt_vocoder_open` and not be used afterwards.
 */
void lgpt_vocoder_free(LgptVocoder *handle);

/**
 * One-step synthesis from first-group tokens (no condition).
 * `samples` must hold num_tokens·frame_samples f32.
 *
 * # Safety
 * `tokens` must point to `num_tokens` u16 and `samples` to
 * `num_tokens·frame_samples` f32 slots.
 */
LgptStatus lgpt_synthesize(const LgptCodec *codec,
                           const LgptVocoder *vocoder,
                           const uint16_t *tokens,
                           uintptr_t num_tokens,
                           float *samples);

/**
 * # Safety
 * As for `lgpt_codec_open`.
 */
LgptStatus lgpt_lm_open(const char *config_path, const char *ckpt_path, LgptLm **out);

/**
 * # Safety
 * `handle` must come from `lgpt_lm_open` and not be used afterwards.
 */
void lgpt_lm_free(LgptLm *handle);

/**
 * Greedy speech recognition: mono f32 samples → UTF-8 transcript.
 * Writes up to `cap-1` bytes plus a NUL terminator; `written` (if non-null)
 * receives the untruncated byte length.
 *
 * # Safety
 * `samples` must point to `num_samples` floats, `text` to `cap` bytes.
 */
LgptStatus lgpt_transcribe(const LgptLm *lm,
                           const float *samples,
                           uintptr_t num_samples,
                           char *text,
                           uintptr_t cap,
                           uintptr_t *written);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* LGPT_H */
