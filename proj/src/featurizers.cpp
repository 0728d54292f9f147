#include "dg/featurizers.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

namespace dg {

namespace {

constexpr int kVisualKernel = 3;
constexpr int kAudioKernel = 5;
constexpr int kAlignerKernel = 3;

TensorPtr init_conv_weight(std::vector<std::int64_t> shape, Rng& rng) {
    std::int64_t fan_in = 1;
    for (std::size_t i = 1; i < shape.size(); ++i) fan_in *= shape[i];
    return Tensor::normal(std::move(shape), rng, 1.0 / std::sqrt(static_cast<double>(fan_in)),
                          true);
}

template <typename T>
void write_pod(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is, const char* what) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw CorruptFile(std::string("checkpoint truncated reading ") + what);
    return v;
}

} // namespace

std::vector<TensorPtr> ModelParams::all_params() const {
    std::vector<TensorPtr> out;
    out.reserve(named.size());
    for (const auto& n : named) out.push_back(n.value);
    return out;
}

std::vector<TensorPtr> ModelParams::aligner_params() const {
    std::vector<TensorPtr> out;
    for (const auto& n : named)
        if (n.aligner) out.push_back(n.value);
    return out;
}

std::vector<TensorPtr> ModelParams::backbone_params() const {
    std::vector<TensorPtr> out;
    for (const auto& n : named)
        if (!n.aligner) out.push_back(n.value);
    return out;
}

const TensorPtr& ModelParams::find(const std::string& name) const {
    for (const auto& n : named)
        if (n.name == name) return n.value;
    throw Error("no parameter named " + name);
}

TensorPtr ModelParams::gamma() const { return exp(log_gamma); }

ModelParams init_params(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    ModelParams p;
    p.config = config;
    Rng rng = Rng(seed).sub("init");

    const std::int64_t ck = config.c * config.k;
    const auto& vw = config.visual_widths;
    const auto& aw = config.audio_widths;

    std::int64_t cin = config.image_channels;
    for (int i = 0; i < 3; ++i) {
        p.visual_w[i] = init_conv_weight({vw[i], cin, kVisualKernel, kVisualKernel}, rng);
        p.visual_b[i] = Tensor::zeros({vw[i]}, true);
        cin = vw[i];
    }
    p.v_ln_gain = Tensor::full({vw[2]}, 1.0, true);
    p.v_ln_bias = Tensor::zeros({vw[2]}, true);
    p.v_proj_w = init_conv_weight({ck, vw[2], 1, 1}, rng);
    p.v_proj_b = Tensor::zeros({ck}, true);

    cin = config.clip_channels;
    for (int i = 0; i < 3; ++i) {
        p.audio_w[i] = init_conv_weight({aw[i], cin, kAudioKernel}, rng);
        p.audio_b[i] = Tensor::zeros({aw[i]}, true);
        cin = aw[i];
    }
    p.a_ln_gain = Tensor::full({aw[2]}, 1.0, true);
    p.a_ln_bias = Tensor::zeros({aw[2]}, true);
    p.a_c1_w = init_conv_weight({config.audio_hidden, aw[2], kAlignerKernel}, rng);
    p.a_c1_b = Tensor::zeros({config.audio_hidden}, true);
    p.a_c2_w = init_conv_weight({ck, config.audio_hidden, kAlignerKernel}, rng);
    p.a_c2_b = Tensor::zeros({ck}, true);

    p.log_gamma = Tensor::scalar(0.0, true); // gamma = 1 at init

    p.named = {
        {"visual.backbone.conv0.w", p.visual_w[0], false},
        {"visual.backbone.conv0.b", p.visual_b[0], false},
        {"visual.backbone.conv1.w", p.visual_w[1], false},
        {"visual.backbone.conv1.b", p.visual_b[1], false},
        {"visual.backbone.conv2.w", p.visual_w[2], false},
        {"visual.backbone.conv2.b", p.visual_b[2], false},
        {"visual.aligner.ln.gain", p.v_ln_gain, true},
        {"visual.aligner.ln.bias", p.v_ln_bias, true},
        {"visual.aligner.proj.w", p.v_proj_w, true},
        {"visual.aligner.proj.b", p.v_proj_b, true},
        {"audio.backbone.conv0.w", p.audio_w[0], false},
        {"audio.backbone.conv0.b", p.audio_b[0], false},
        {"audio.backbone.conv1.w", p.audio_w[1], false},
        {"audio.backbone.conv1.b", p.audio_b[1], false},
        {"audio.backbone.conv2.w", p.audio_w[2], false},
        {"audio.backbone.conv2.b", p.audio_b[2], false},
        {"audio.aligner.ln.gain", p.a_ln_gain, true},
        {"audio.aligner.ln.bias", p.a_ln_bias, true},
        {"audio.aligner.conv1.w", p.a_c1_w, true},
        {"audio.aligner.conv1.b", p.a_c1_b, true},
        {"audio.aligner.conv2.w", p.a_c2_w, true},
        {"audio.aligner.conv2.b", p.a_c2_b, true},
        {"log_gamma", p.log_gamma, true},
    };
    return p;
}

TensorPtr visual_forward(const ModelParams& p, const TensorPtr& image) {
    const auto& c = p.config;
    if (image->shape !=
        std::vector<std::int64_t>{c.image_channels, c.image_size, c.image_size}) {
        throw ShapeMismatch("visual_forward: unexpected image shape");
    }
    TensorPtr x = image;
    for (int i = 0; i < 3; ++i) {
        x = relu(conv(x, p.visual_w[i], p.visual_b[i], 2, Padding::Same, 2));
    }
    x = layer_norm_channel(x, p.v_ln_gain, p.v_ln_bias, c.eps_ln);
    x = conv(x, p.v_proj_w, p.v_proj_b, 2, Padding::Same, 1);
    // channel index c*K + k: a plain row-major reshape performs the head split
    return reshape(x, {c.c, c.k, c.h(), c.w()});
}

AudioFeatures audio_forward(const ModelParams& p, const TensorPtr& clip,
                            std::int64_t valid_len) {
    const auto& c = p.config;
    if (clip->shape != std::vector<std::int64_t>{c.clip_channels, c.clip_len}) {
        throw ShapeMismatch("audio_forward: unexpected clip shape");
    }
    if (valid_len < 0 || valid_len > c.clip_len) {
        throw ShapeMismatch("audio_forward: valid_len outside [0, clip_len]");
    }
    TensorPtr x = clip;
    for (int i = 0; i < 3; ++i) {
        x = relu(conv(x, p.audio_w[i], p.audio_b[i], 1, Padding::Same, 2));
    }
    x = layer_norm_channel(x, p.a_ln_gain, p.a_ln_bias, c.eps_ln);
    x = relu(conv(x, p.a_c1_w, p.a_c1_b, 1, Padding::Same, 1));
    x = conv(x, p.a_c2_w, p.a_c2_b, 1, Padding::Same, 1);
    AudioFeatures out;
    out.features = reshape(x, {c.c, c.k, 1, c.t()});
    out.t_valid =
        (valid_len + ModelConfig::stride_product - 1) / ModelConfig::stride_product;
    return out;
}

void save_checkpoint(const std::string& path, const ModelParams& params,
                     const std::vector<std::pair<std::string, TensorPtr>>& extra,
                     const nlohmann::json& config_echo, std::uint64_t step) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot open checkpoint for writing: " + path);
    os.write("DGCK", 4);
    write_pod<std::uint32_t>(os, 1u);
    const std::string cfg = canonical_json(config_echo);
    write_pod<std::uint64_t>(os, cfg.size());
    os.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
    write_pod<std::uint64_t>(os, step);
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(params.named.size() + extra.size()));
    auto write_entry = [&](const std::string& name, const TensorPtr& t) {
        write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_tensor(os, *t, DType::F64);
    };
    for (const auto& n : params.named) write_entry(n.name, n.value);
    for (const auto& [name, t] : extra) write_entry(name, t);
    if (!os) throw Error("checkpoint write failed: " + path);
}

TensorPtr Checkpoint::find(const std::string& name) const {
    for (const auto& [n, t] : tensors)
        if (n == name) return t;
    return nullptr;
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw CorruptFile("cannot open checkpoint: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "DGCK", 4) != 0) throw CorruptFile("bad checkpoint magic");
    const auto version = read_pod<std::uint32_t>(is, "version");
    if (version != 1) throw CorruptFile("unsupported checkpoint version");
    const auto cfg_len = read_pod<std::uint64_t>(is, "config length");
    if (cfg_len > (1ull << 24)) throw CorruptFile("implausible checkpoint config length");
    std::string cfg(cfg_len, '\0');
    is.read(cfg.data(), static_cast<std::streamsize>(cfg_len));
    if (!is) throw CorruptFile("checkpoint truncated reading config");
    Checkpoint ck;
    try {
        ck.config = nlohmann::json::parse(cfg);
    } catch (const nlohmann::json::exception& e) {
        throw CorruptFile(std::string("checkpoint config echo is not valid JSON: ") + e.what());
    }
    ck.step = read_pod<std::uint64_t>(is, "step");
    const auto count = read_pod<std::uint32_t>(is, "tensor count");
    if (count > 4096) throw CorruptFile("implausible checkpoint tensor count");
    ck.tensors.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto name_len = read_pod<std::uint32_t>(is, "name length");
        if (name_len > 4096) throw CorruptFile("implausible checkpoint name length");
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        if (!is) throw CorruptFile("checkpoint truncated reading name");
        ck.tensors.emplace_back(std::move(name), read_tensor(is));
    }
    return ck;
}

ModelParams params_from_checkpoint(const Checkpoint& ck) {
    if (!ck.config.contains("model")) throw CorruptFile("checkpoint config echo lacks \"model\"");
    ModelParams p = init_params(model_config_from_json(ck.config.at("model")), 0);
    for (auto& n : p.named) {
        TensorPtr stored = ck.find(n.name);
        if (!stored) throw CorruptFile("checkpoint missing parameter " + n.name);
        if (stored->shape != n.value->shape) {
            throw CorruptFile("checkpoint parameter " + n.name + " has unexpected shape");
        }
        n.value->data = stored->data;
    }
    return p;
}

} // namespace dg
