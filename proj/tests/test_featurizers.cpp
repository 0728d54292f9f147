#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "dg/featurizers.hpp"

using namespace dg;
namespace fs = std::filesystem;

namespace {

bool bitwise_equal(const TensorPtr& a, const TensorPtr& b) {
    return a->shape == b->shape &&
           std::memcmp(a->data.data(), b->data.data(), a->data.size() * sizeof(double)) == 0;
}

TensorPtr rand_tensor(std::vector<std::int64_t> shape, Rng& rng, bool requires_grad = false) {
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    std::vector<double> v(static_cast<std::size_t>(n));
    for (auto& x : v) x = rng.uniform(-1.0, 1.0);
    return Tensor::create(std::move(shape), std::move(v), requires_grad);
}

// Small geometry so full-network gradient checks stay fast.
ModelConfig tiny_config() {
    ModelConfig m;
    m.c = 2;
    m.k = 2;
    m.image_size = 16;
    m.image_channels = 2;
    m.clip_len = 32;
    m.clip_channels = 1;
    m.visual_widths = {3, 4, 4};
    m.audio_widths = {3, 4, 4};
    m.audio_hidden = 5;
    return m;
}

fs::path temp_file(const std::string& name) {
    fs::path dir = fs::temp_directory_path() / "dg_featurizer_tests";
    fs::create_directories(dir);
    return dir / name;
}

} // namespace

TEST_CASE("init is deterministic per seed and differs across seeds") {
    ModelConfig m; // desk defaults
    ModelParams a = init_params(m, 11);
    ModelParams b = init_params(m, 11);
    ModelParams c = init_params(m, 12);
    REQUIRE(a.named.size() == b.named.size());
    for (std::size_t i = 0; i < a.named.size(); ++i) {
        CHECK(a.named[i].name == b.named[i].name);
        CHECK(bitwise_equal(a.named[i].value, b.named[i].value));
    }
    bool any_diff = false;
    for (std::size_t i = 0; i < a.named.size(); ++i) {
        if (!bitwise_equal(a.named[i].value, c.named[i].value)) any_diff = true;
    }
    CHECK(any_diff);
}

TEST_CASE("init values match the documented scheme") {
    ModelParams p = init_params(ModelConfig{}, 3);

    // gamma = exp(0) = 1 exactly
    CHECK(p.log_gamma->data[0] == 0.0);
    CHECK(p.gamma()->data[0] == 1.0);

    // biases zero, LN gain one / bias zero
    for (auto v : p.visual_b[0]->data) CHECK(v == 0.0);
    for (auto v : p.a_c2_b->data) CHECK(v == 0.0);
    for (auto v : p.v_ln_gain->data) CHECK(v == 1.0);
    for (auto v : p.v_ln_bias->data) CHECK(v == 0.0);
    for (auto v : p.a_ln_gain->data) CHECK(v == 1.0);
    for (auto v : p.a_ln_bias->data) CHECK(v == 0.0);

    // every parameter wants gradients
    for (const auto& n : p.named) CHECK(n.value->requires_grad);
}

TEST_CASE("conv weight stddev tracks 1/sqrt(fan_in)") {
    // A wide config so a single weight tensor gives a large sample.
    ModelConfig m;
    m.visual_widths = {48, 16, 16};
    ModelParams p = init_params(m, 5);
    const auto& w = p.visual_w[0]->data; // [48, 3, 3, 3] -> 1296 draws, fan_in = 27
    double sum = 0, sumsq = 0;
    for (double v : w) {
        sum += v;
        sumsq += v * v;
    }
    const double n = static_cast<double>(w.size());
    CHECK(w.size() == 48u * 3u * 3u * 3u);
    const double mean = sum / n;
    const double stddev = std::sqrt(sumsq / n - mean * mean);
    const double target = 1.0 / std::sqrt(27.0);
    CHECK(std::abs(mean) < 0.05 * target * 10); // mean near zero on this scale
    CHECK(stddev == doctest::Approx(target).epsilon(0.20));
}

TEST_CASE("forward shape contracts on the desk config") {
    ModelConfig m;
    ModelParams p = init_params(m, 7);
    Rng rng(99);

    TensorPtr image = rand_tensor({3, 64, 64}, rng);
    TensorPtr vf = visual_forward(p, image);
    CHECK(vf->shape == std::vector<std::int64_t>{32, 2, 8, 8});

    TensorPtr clip = rand_tensor({1, 256}, rng);
    AudioFeatures af = audio_forward(p, clip, 256);
    CHECK(af.features->shape == std::vector<std::int64_t>{32, 2, 1, 32});
    CHECK(af.t_valid == 32);

    // ceil(100/8) = 13
    CHECK(audio_forward(p, clip, 100).t_valid == 13);
    CHECK(audio_forward(p, clip, 1).t_valid == 1);
    CHECK(audio_forward(p, clip, 0).t_valid == 0);

    for (double v : vf->data) CHECK(std::isfinite(v));
    for (double v : af.features->data) CHECK(std::isfinite(v));
}

TEST_CASE("silence and constant inputs stay finite") {
    ModelParams p = init_params(ModelConfig{}, 21);
    TensorPtr silence = Tensor::zeros({1, 256});
    AudioFeatures af = audio_forward(p, silence, 256);
    for (double v : af.features->data) CHECK(std::isfinite(v));

    TensorPtr flat = Tensor::full({3, 64, 64}, 0.5);
    TensorPtr vf = visual_forward(p, flat);
    for (double v : vf->data) CHECK(std::isfinite(v));
}

TEST_CASE("head split is a row-major reshape: channel index c*K + k") {
    // With the projection output laid out [C*K, H, W], feature (c, k, y, x)
    // must equal flat channel c*K + k. Verify against a manual reshape.
    ModelConfig m = tiny_config();
    ModelParams p = init_params(m, 31);
    Rng rng(32);
    TensorPtr image = rand_tensor({m.image_channels, m.image_size, m.image_size}, rng);
    TensorPtr vf = visual_forward(p, image);

    // Recompute the pre-split map by hand.
    TensorPtr x = image;
    for (int i = 0; i < 3; ++i) x = relu(conv(x, p.visual_w[i], p.visual_b[i], 2, Padding::Same, 2));
    x = layer_norm_channel(x, p.v_ln_gain, p.v_ln_bias, m.eps_ln);
    x = conv(x, p.v_proj_w, p.v_proj_b, 2, Padding::Same, 1); // [C*K, H, W]

    const std::int64_t H = m.h(), W = m.w();
    for (std::int64_t c = 0; c < m.c; ++c)
        for (std::int64_t k = 0; k < m.k; ++k)
            for (std::int64_t y = 0; y < H; ++y)
                for (std::int64_t xx = 0; xx < W; ++xx) {
                    const double split =
                        vf->data[static_cast<std::size_t>(((c * m.k + k) * H + y) * W + xx)];
                    const double flat =
                        x->data[static_cast<std::size_t>(((c * m.k + k) * H + y) * W + xx)];
                    CHECK(split == flat);
                }
}

TEST_CASE("aligner/backbone partition is exact") {
    ModelParams p = init_params(ModelConfig{}, 41);
    auto all = p.all_params();
    auto aligner = p.aligner_params();
    auto backbone = p.backbone_params();
    CHECK(all.size() == aligner.size() + backbone.size());

    std::set<const Tensor*> set_all, set_split;
    for (const auto& t : all) set_all.insert(t.get());
    for (const auto& t : aligner) set_split.insert(t.get());
    for (const auto& t : backbone) set_split.insert(t.get());
    CHECK(set_all == set_split);
    CHECK(set_all.size() == all.size()); // no duplicates

    // log_gamma and both aligners are warm-up trainable; conv backbones are not.
    CHECK(std::count_if(p.named.begin(), p.named.end(), [](const auto& n) {
              return n.aligner;
          }) == 11);
    CHECK(p.find("log_gamma").get() == p.log_gamma.get());
    CHECK_THROWS_AS(p.find("no_such_parameter"), Error);
}

TEST_CASE("gradients flow end to end through both featurizers") {
    ModelConfig m = tiny_config();
    ModelParams p = init_params(m, 51);
    Rng rng(52);

    SUBCASE("visual: d(sum of features)/d(image)") {
        TensorPtr image = rand_tensor({m.image_channels, m.image_size, m.image_size}, rng, true);
        auto f = [&](const TensorPtr& x) { return reduce_sum(visual_forward(p, x), {0, 1, 2, 3}); };
        CHECK(grad_check(f, image) < 1e-4);
    }
    SUBCASE("audio: d(sum of features)/d(clip)") {
        TensorPtr clip = rand_tensor({m.clip_channels, m.clip_len}, rng, true);
        auto f = [&](const TensorPtr& x) {
            return reduce_sum(audio_forward(p, x, m.clip_len).features, {0, 1, 2, 3});
        };
        CHECK(grad_check(f, clip) < 1e-4);
    }
}

TEST_CASE("input shape validation") {
    ModelParams p = init_params(ModelConfig{}, 61);
    Rng rng(62);
    CHECK_THROWS_AS(visual_forward(p, rand_tensor({3, 32, 64}, rng)), ShapeMismatch);
    CHECK_THROWS_AS(visual_forward(p, rand_tensor({1, 64, 64}, rng)), ShapeMismatch);
    CHECK_THROWS_AS(audio_forward(p, rand_tensor({1, 128}, rng), 128), ShapeMismatch);
    CHECK_THROWS_AS(audio_forward(p, rand_tensor({1, 256}, rng), 257), ShapeMismatch);
    CHECK_THROWS_AS(audio_forward(p, rand_tensor({1, 256}, rng), -1), ShapeMismatch);
    ModelConfig bad;
    bad.c = -1;
    CHECK_THROWS_AS(init_params(bad, 1), InvalidConfig);
}

TEST_CASE("checkpoints round-trip bitwise with config echo and extras") {
    ModelConfig m = tiny_config();
    ModelParams p = init_params(m, 71);
    // Perturb a weight so we are not just testing init determinism.
    p.visual_w[0]->data[0] = 0.123456789;
    p.log_gamma->data[0] = 0.25;

    nlohmann::json echo = {{"model", to_json(m)}, {"seed", 71}};
    Rng rng(72);
    TensorPtr extra = rand_tensor({4}, rng);
    fs::path path = temp_file("ck.dgck");
    save_checkpoint(path.string(), p, {{"opt.m.test", extra}}, echo, 1234);

    Checkpoint ck = load_checkpoint(path.string());
    CHECK(ck.step == 1234);
    CHECK(canonical_json(ck.config) == canonical_json(echo));
    CHECK(ck.tensors.size() == p.named.size() + 1);
    CHECK(bitwise_equal(ck.find("opt.m.test"), extra));
    CHECK(ck.find("missing") == nullptr);

    ModelParams q = params_from_checkpoint(ck);
    REQUIRE(q.named.size() == p.named.size());
    for (std::size_t i = 0; i < p.named.size(); ++i) {
        CHECK(q.named[i].name == p.named[i].name);
        CHECK(bitwise_equal(q.named[i].value, p.named[i].value));
    }
    CHECK(q.log_gamma->data[0] == 0.25);
    CHECK(q.config.c == m.c);
}

TEST_CASE("corrupt checkpoints are rejected") {
    ModelConfig m = tiny_config();
    ModelParams p = init_params(m, 81);
    nlohmann::json echo = {{"model", to_json(m)}};
    fs::path path = temp_file("ck_corrupt.dgck");
    save_checkpoint(path.string(), p, {}, echo, 7);

    auto read_bytes = [&]() {
        std::ifstream is(path, std::ios::binary);
        return std::string(std::istreambuf_iterator<char>(is), {});
    };
    auto write_bytes = [&](const fs::path& where, const std::string& bytes) {
        std::ofstream os(where, std::ios::binary);
        os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    };
    const std::string good = read_bytes();

    SUBCASE("bad magic") {
        std::string bad = good;
        bad[0] = 'X';
        fs::path bp = temp_file("bad_magic.dgck");
        write_bytes(bp, bad);
        CHECK_THROWS_AS(load_checkpoint(bp.string()), CorruptFile);
    }
    SUBCASE("truncated") {
        fs::path bp = temp_file("truncated.dgck");
        write_bytes(bp, good.substr(0, good.size() / 2));
        CHECK_THROWS_AS(load_checkpoint(bp.string()), CorruptFile);
    }
    SUBCASE("missing file") {
        CHECK_THROWS_AS(load_checkpoint((temp_file("no_dir") / "x.dgck").string()), CorruptFile);
    }
    SUBCASE("missing parameter rejected when rebuilding") {
        // A checkpoint whose echo is fine but lacks tensors: write an empty-tensor variant.
        fs::path bp = temp_file("few_tensors.dgck");
        std::ofstream os(bp, std::ios::binary);
        os.write("DGCK", 4);
        std::uint32_t version = 1;
        os.write(reinterpret_cast<const char*>(&version), 4);
        const std::string cfg = canonical_json(echo);
        std::uint64_t cfg_len = cfg.size();
        os.write(reinterpret_cast<const char*>(&cfg_len), 8);
        os.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
        std::uint64_t step = 0;
        os.write(reinterpret_cast<const char*>(&step), 8);
        std::uint32_t count = 0;
        os.write(reinterpret_cast<const char*>(&count), 4);
        os.close();
        Checkpoint ck = load_checkpoint(bp.string());
        CHECK_THROWS_AS(params_from_checkpoint(ck), CorruptFile);
    }
}

TEST_CASE("forward passes do not mutate parameters") {
    ModelConfig m = tiny_config();
    ModelParams p = init_params(m, 91);
    std::vector<std::vector<double>> before;
    for (const auto& n : p.named) before.push_back(n.value->data);
    Rng rng(92);
    (void)visual_forward(p, rand_tensor({m.image_channels, m.image_size, m.image_size}, rng));
    (void)audio_forward(p, rand_tensor({m.clip_channels, m.clip_len}, rng), m.clip_len);
    for (std::size_t i = 0; i < p.named.size(); ++i) CHECK(p.named[i].value->data == before[i]);
}
