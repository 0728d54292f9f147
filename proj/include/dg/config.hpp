#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "dg/error.hpp"

namespace dg {

// Pooling over the head axis inside the score aggregation (Eq. 2 uses max;
// mean is the ablation variant).
enum class HeadPool { Max, Mean };

// Feature-model dimensions and architecture knobs. Spatial/temporal feature
// dims are derived from the input dims via the fixed stride product (three
// stride-2 blocks = 8).
struct ModelConfig {
    std::int64_t c = 32; // channels per head
    std::int64_t k = 2;  // heads
    std::int64_t image_size = 64;
    std::int64_t image_channels = 3;
    std::int64_t clip_len = 256;
    std::int64_t clip_channels = 1;
    std::vector<std::int64_t> visual_widths = {8, 16, 16};
    std::vector<std::int64_t> audio_widths = {8, 16, 16};
    std::int64_t audio_hidden = 32;
    HeadPool head_pool = HeadPool::Max;
    double eps_ln = 1e-5;

    static constexpr std::int64_t stride_product = 8;
    std::int64_t h() const { return image_size / stride_product; }
    std::int64_t w() const { return image_size / stride_product; }
    std::int64_t t() const { return clip_len / stride_product; }
    std::int64_t f() const { return 1; }

    void validate() const;
};

// Synthetic corpus layout: class textures on a cell grid plus per-class audio
// event signatures, two regimes with disjoint audio vocabularies.
struct DataConfig {
    std::int64_t classes = 12;
    std::int64_t min_objects = 1;
    std::int64_t max_objects = 3;
    std::int64_t train_samples = 2000;
    std::int64_t eval_samples = 400;
    double regime_ratio = 0.5; // fraction of language-regime samples
    std::int64_t image_size = 64;
    std::int64_t image_channels = 3;
    std::int64_t clip_len = 256;
    std::int64_t clip_channels = 1;
    std::int64_t cell = 16;      // object texture side; grid = image_size / cell
    std::int64_t event_len = 64; // audio event length in raw samples
    double image_noise = 0.05;
    double audio_noise = 0.02;
    double min_valid_frac = 0.75; // valid_len drawn in [frac*clip_len, clip_len]

    std::int64_t grid() const { return image_size / cell; }
    void validate() const;
};

struct TrainConfig {
    std::int64_t batch_size = 8;
    std::int64_t warmup_steps = 300;
    std::int64_t total_steps = 5000;
    double lr_warmup = 1e-3;
    double lr_full = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double clip_norm = 5.0;
    double splice_prob = 0.5;
    double splice_min_frac = 0.10;
    double splice_max_frac = 0.25;
    double flip_prob = 0.5;
    std::int64_t eval_cadence = 1000; // checkpoint every this many steps
    std::string regime = "mixed";     // mixed | language | sound
    std::int64_t omega = 250;         // |Ω| for l_nonneg
    double lambda_dis = 0.05;
    double lambda_splice = 0.01;
    double lambda_cal = 0.1;
    double lambda_nonneg = 0.01;
    double lambda_tv = 0.01;
    std::vector<std::string> disable; // subset of {dis,splice,cal,nonneg,tv}

    void validate() const;
};

struct EvalConfig {
    std::int64_t retrieval_n = 100;
    std::int64_t miou_thresholds = 20;

    void validate() const;
};

// One top-level config document shared by all commands; each command reads the
// sections it needs. Unknown keys are rejected naming the offender.
struct RunConfig {
    std::uint64_t seed = 1;
    ModelConfig model;
    DataConfig data;
    TrainConfig train;
    EvalConfig eval;

    void validate() const;
};

HeadPool head_pool_from_string(const std::string& s);
std::string to_string(HeadPool p);

nlohmann::json to_json(const ModelConfig&);
nlohmann::json to_json(const DataConfig&);
nlohmann::json to_json(const TrainConfig&);
nlohmann::json to_json(const EvalConfig&);
nlohmann::json to_json(const RunConfig&);

ModelConfig model_config_from_json(const nlohmann::json&);
DataConfig data_config_from_json(const nlohmann::json&);
TrainConfig train_config_from_json(const nlohmann::json&);
EvalConfig eval_config_from_json(const nlohmann::json&);
RunConfig run_config_from_json(const nlohmann::json&);

RunConfig load_run_config(const std::string& path);

// Canonical serialization: alphabetical keys, two-space indent, trailing
// newline. Used for config echoes, manifests, and reports.
std::string canonical_json(const nlohmann::json&);

} // namespace dg
