#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dg/config.hpp"
#include "dg/rng.hpp"
#include "dg/tensor.hpp"

namespace dg {

// The two planted cross-modal regimes. Both draw from the same visual class
// vocabulary; their audio event vocabularies are disjoint (low-frequency
// enveloped carriers for language, high-frequency AM tones for sound).
enum class Regime { Language, Sound };

std::string to_string(Regime r);
Regime regime_from_string(const std::string& s);

struct ObjectInstance {
    std::int64_t class_id = 0;
    std::int64_t cell_y = 0, cell_x = 0; // grid cell holding the texture
    TensorPtr mask;                      // [H_in, W_in] binary ground truth
    std::int64_t t_start = 0, t_end = 0; // audio event window in raw samples
};

struct SamplePair {
    TensorPtr image; // [C_in, H_in, W_in]
    TensorPtr clip;  // [C_in, T_in]
    Regime regime = Regime::Language;
    std::vector<ObjectInstance> objects;
    std::vector<double> splice_mask; // length T_in, in [0,1]; 1 on padded silence
    std::int64_t valid_len = 0;
};

// Fixed per-class texture [C_in, cell, cell] in [0.15, 0.85]: a random 4x4
// lattice per channel, bilinearly upsampled. Identical for every sample of a
// corpus (keyed by corpus seed and class only).
TensorPtr class_texture(const DataConfig& d, std::uint64_t corpus_seed, std::int64_t class_id);

// Deterministic audio event signature of length event_len for one (regime,
// class): no dependence on the corpus seed, so the vocabularies are fixed
// properties of the generator.
std::vector<double> class_signature(const DataConfig& d, Regime regime, std::int64_t class_id);

// Vocabulary tables for the manifest (period/envelope per class and regime).
nlohmann::json vocabulary_tables(const DataConfig& d);

// One sample: places distinct-class textures on distinct grid cells, plants
// one audio event per object inside [0, valid_len), fills background noise,
// pads the tail with silence, and quantizes everything through f32 so the
// in-memory sample equals its file round-trip bitwise.
// Throws PlacementFailure when the drawn events cannot fit.
SamplePair make_sample(const DataConfig& d, std::uint64_t corpus_seed, Regime regime, Rng& rng);

// Crossfade a donor segment into clip at `position` with linear ramps of
// ramp_len on both ends (inside the segment). Returns the new clip and the
// splice mask contribution: 1 in the pure donor region, in (0,1) on ramps,
// 0 elsewhere. Throws OutOfBounds when segment or ramps do not fit.
struct SpliceResult {
    TensorPtr clip;
    std::vector<double> mask;
};
SpliceResult splice_negative(const TensorPtr& clip, const TensorPtr& donor_segment,
                             std::int64_t position, std::int64_t ramp_len);

// Trim or zero-pad a [C, L] clip to [C, t_target]; silence_mask is 1 on the
// padded tail.
struct PadResult {
    TensorPtr clip;
    std::int64_t valid_len = 0;
    std::vector<double> silence_mask;
};
PadResult pad_or_trim(const TensorPtr& clip, std::int64_t t_target);

// ---- corpus files ------------------------------------------------------------
// Sample file "DGSP": magic, u32 version, u64-length-prefixed canonical JSON
// header (regime, objects with class/cell/event, valid_len, shapes), then
// DGT1 tensors in fixed order: image, clip, splice_mask, one mask per object.
// All tensors stored as f32.

void save_sample(const std::string& path, const SamplePair& s);
SamplePair load_sample(const std::string& path); // CorruptFile | InvariantViolation

struct ManifestRecord {
    std::string path; // relative to the corpus root
    Regime regime = Regime::Language;
    std::vector<std::int64_t> class_ids;
    std::vector<std::pair<std::int64_t, std::int64_t>> events;
    std::int64_t valid_len = 0;
};

struct CorpusManifest {
    std::uint64_t seed = 0;
    nlohmann::json config_echo;
    std::vector<ManifestRecord> train;
    std::vector<ManifestRecord> eval;
    nlohmann::json vocab;
};

// Generates train/ and eval/ sample files plus manifest.json under out_dir.
// Regime counts are exact (round(ratio * n) language samples first); content
// is derived from per-index forked streams, so it is independent of
// generation order. Deterministic per seed.
CorpusManifest generate_corpus(const DataConfig& d, std::uint64_t seed,
                               const std::string& out_dir);

CorpusManifest load_manifest(const std::string& corpus_dir);

nlohmann::json manifest_to_json(const CorpusManifest& m);

} // namespace dg
