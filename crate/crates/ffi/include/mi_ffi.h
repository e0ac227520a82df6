/* C ABI for the memory-inception engine. Generated by cbindgen; do not edit. */

#pragma once

/* Generated with cbindgen:0.29.4 */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Routing mode for `mi_plan_build`: augmented cache.
#define MI_MODE_AUGMENTED 0

// Routing mode for `mi_plan_build`: factored bank mixture.
#define MI_MODE_MIXTURE 1

// Routing mode for `mi_plan_build`: side-bank approximation.
#define MI_MODE_SIDEBANK 2

// Status codes returned by every fallible call.
typedef enum MiStatus {
  Ok = 0,
  InvalidArgument = 1,
  FormatError = 2,
  CompatibilityError = 3,
  EmptyBank = 4,
  InvalidPlan = 5,
  ConfigurationError = 6,
  IoError = 7,
  NullPointer = 8,
  InvalidUtf8 = 9,
  Panic = 10,
} MiStatus;

// Opaque frozen selector-artifact handle.
typedef struct MiArtifact MiArtifact;

// Opaque frozen bank handle.
typedef struct MiBank MiBank;

// Opaque frozen model handle.
typedef struct MiModel MiModel;

// Opaque steering-plan handle; owns deep copies of its artifact and banks.
typedef struct MiPlan MiPlan;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Crate version as a static string; never freed by the caller.
const char *mi_version(void);

// Message for the most recent error on this thread. Valid until the next
// failing call on the same thread; do not free.
const char *mi_last_error_message(void);

// Free a string returned through an out-pointer.
//
// # Safety
// `s` must have been returned by this library and not freed before.
void mi_string_free(char *s);

// Build a deterministic synthetic model from a JSON config (the same
// schema as the CLI synth spec's "config" object).
//
// # Safety
// `config_json` must be a valid NUL-terminated string; `out` must be a
// valid pointer.
enum MiStatus mi_model_synth(const char *config_json, uint64_t seed, struct MiModel **out);

// Load a model from an MIW1 file.
//
// # Safety
// `path` must be a valid NUL-terminated string; `out` must be valid.
enum MiStatus mi_model_load(const char *path, struct MiModel **out);

// Save a model as MIW1.
//
// # Safety
// `model` must be a live handle; `path` a valid string.
enum MiStatus mi_model_save(const struct MiModel *model, const char *path);

// Hex fingerprint of the model; free with `mi_string_free`.
//
// # Safety
// `model` must be a live handle; `out` must be valid.
enum MiStatus mi_model_fingerprint(const struct MiModel *model, char **out);

// # Safety
// `model` must be a handle from this library, freed at most once.
void mi_model_free(struct MiModel *model);

// Build a bank from a bank-spec JSON at explicit sites, passed as a flat
// `[layer0, unit0, layer1, unit1, ...]` array of `2 * n_sites` entries.
//
// # Safety
// All pointers must be valid; `sites` must hold `2 * n_sites` entries.
enum MiStatus mi_bank_build(const struct MiModel *model,
                            const char *spec_json,
                            const uint32_t *sites,
                            size_t n_sites,
                            struct MiBank **out);

// Load an MIB1 bank, verifying the model fingerprint unless
// `allow_fingerprint_mismatch` is set.
//
// # Safety
// All pointers must be valid.
enum MiStatus mi_bank_load(const struct MiModel *model,
                           const char *path,
                           bool allow_fingerprint_mismatch,
                           struct MiBank **out);

// # Safety
// All pointers must be valid.
enum MiStatus mi_bank_save(const struct MiBank *bank, const char *path);

// Slot count of a bank; 0 for a null handle.
//
// # Safety
// `bank` must be null or a live handle.
uint32_t mi_bank_slot_count(const struct MiBank *bank);

// # Safety
// `bank` must be a handle from this library, freed at most once.
void mi_bank_free(struct MiBank *bank);

// Calibrate the selector over all (layer, unit) candidates: prompts are
// a JSON array of strings, byte-tokenized. The reference bank may be
// null; `steps` of 0 keeps the default continuation length.
//
// # Safety
// All pointers must be valid (reference may be null).
enum MiStatus mi_calibrate(const struct MiModel *model,
                           const struct MiBank *target,
                           const struct MiBank *reference,
                           const char *prompts_json,
                           size_t k,
                           size_t m,
                           size_t steps,
                           struct MiArtifact **out);

// # Safety
// All pointers must be valid.
enum MiStatus mi_artifact_load(const struct MiModel *model,
                               const char *path,
                               struct MiArtifact **out);

// # Safety
// All pointers must be valid.
enum MiStatus mi_artifact_save(const struct MiArtifact *artifact, const char *path);

// # Safety
// `artifact` must be a handle from this library, freed at most once.
void mi_artifact_free(struct MiArtifact *artifact);

// Assemble a steering plan from an artifact and banks. The plan deep-
// copies its inputs, so handles stay independent, and it is validated
// against `model` before being returned.
//
// # Safety
// `banks` must hold `n_banks` live handles; other pointers must be valid.
enum MiStatus mi_plan_build(const struct MiModel *model,
                            const struct MiArtifact *artifact,
                            const struct MiBank *const *banks,
                            size_t n_banks,
                            double lambda_plus,
                            double lambda_minus,
                            double gamma,
                            uint32_t mode,
                            struct MiPlan **out);

// # Safety
// `plan` must be a handle from this library, freed at most once.
void mi_plan_free(struct MiPlan *plan);

// Greedy-decode `steps` tokens from a byte prompt, optionally steered.
// `out_tokens` must hold at least `steps` entries; `out_written` receives
// the number of generated tokens.
//
// # Safety
// `prompt` must hold `prompt_len` bytes; `out_tokens` must hold `steps`
// entries; `plan` may be null.
enum MiStatus mi_generate(const struct MiModel *model,
                          const struct MiPlan *plan,
                          const uint8_t *prompt,
                          size_t prompt_len,
                          size_t steps,
                          uint32_t *out_tokens,
                          size_t *out_written);

// Idealized KV storage ratio `(layers * prompt_tokens) /
// (ctrl_layers * bank_slots)`.
//
// # Safety
// `out` must be a valid pointer.
enum MiStatus mi_kv_ratio(uint64_t layers,
                          uint64_t ctrl_layers,
                          uint64_t prompt_tokens,
                          uint64_t bank_slots,
                          double *out);

// Exact KV bytes for one cache side (factor 2 for keys and values).
//
// # Safety
// `out` must be a valid pointer.
enum MiStatus mi_kv_bytes(uint64_t layers,
                          uint64_t units,
                          uint64_t head_dim,
                          uint64_t positions,
                          uint64_t bytes_per_element,
                          uint64_t *out);

// Run the seeded property suite; returns 0 when every property passes,
// 3 otherwise (matching the CLI exit code).
int32_t mi_check(uint64_t seed, size_t instances);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus
