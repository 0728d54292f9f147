#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dg/config.hpp"
#include "dg/tensor.hpp"

namespace dg {

// All trainable state: toy backbones plus the aligner heads and the calibration
// scalar. Tensors are shared between the structured handles used by the
// forward passes and the flat named list used by the optimizer and
// checkpoints. `aligner` tags the warm-up trainable subset; the backbone set
// is its exact complement.
struct ModelParams {
    ModelConfig config;

    std::array<TensorPtr, 3> visual_w, visual_b;
    TensorPtr v_ln_gain, v_ln_bias, v_proj_w, v_proj_b;

    std::array<TensorPtr, 3> audio_w, audio_b;
    TensorPtr a_ln_gain, a_ln_bias, a_c1_w, a_c1_b, a_c2_w, a_c2_b;

    TensorPtr log_gamma; // gamma = exp(log_gamma) > 0 always

    struct Named {
        std::string name;
        TensorPtr value;
        bool aligner;
    };
    std::vector<Named> named; // fixed, documented order

    std::vector<TensorPtr> all_params() const;
    std::vector<TensorPtr> aligner_params() const;
    std::vector<TensorPtr> backbone_params() const;
    const TensorPtr& find(const std::string& name) const; // throws Error if absent

    // New graph node gamma = exp(log_gamma); build once per step.
    TensorPtr gamma() const;
};

ModelParams init_params(const ModelConfig& config, std::uint64_t seed);

// image [C_in, S, S] -> dense visual features [C, K, H, W].
TensorPtr visual_forward(const ModelParams& p, const TensorPtr& image);

struct AudioFeatures {
    TensorPtr features;   // [C, K, F=1, T]
    std::int64_t t_valid; // ceil(valid_len / stride_product)
};

// clip [C_in, L] -> dense audio features [C, K, 1, T].
AudioFeatures audio_forward(const ModelParams& p, const TensorPtr& clip, std::int64_t valid_len);

// ---- checkpoints ("DGCK") ----------------------------------------------------
// Layout: magic "DGCK", u32 version, u64 config length + canonical-JSON config
// echo, u64 step, u32 tensor count, then per tensor a length-prefixed name and
// a "DGT1" blob. Tensors appear in ModelParams::named order followed by any
// extras (optimizer state), all 64-bit.

void save_checkpoint(const std::string& path, const ModelParams& params,
                     const std::vector<std::pair<std::string, TensorPtr>>& extra,
                     const nlohmann::json& config_echo, std::uint64_t step);

struct Checkpoint {
    nlohmann::json config;
    std::uint64_t step = 0;
    std::vector<std::pair<std::string, TensorPtr>> tensors;

    TensorPtr find(const std::string& name) const; // null when absent
};

Checkpoint load_checkpoint(const std::string& path);

// Rebuilds ModelParams from a checkpoint's config echo and tensor set.
ModelParams params_from_checkpoint(const Checkpoint& ck);

} // namespace dg
