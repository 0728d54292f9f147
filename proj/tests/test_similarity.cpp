#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "dg/similarity.hpp"

using namespace dg;
namespace fs = std::filesystem;

namespace {

TensorPtr rand_tensor(std::vector<std::int64_t> shape, Rng& rng, bool requires_grad = false) {
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    std::vector<double> v(static_cast<std::size_t>(n));
    for (auto& x : v) x = rng.uniform(-1.0, 1.0);
    return Tensor::create(std::move(shape), std::move(v), requires_grad);
}

// Naive 7-loop contraction: s[k,f,t,h,w] = sum_c a[c,k,f,t] * v[c,k,h,w].
std::vector<double> oracle_volume(const TensorPtr& a, const TensorPtr& v) {
    const std::int64_t C = a->shape[0], K = a->shape[1], F = a->shape[2], T = a->shape[3];
    const std::int64_t H = v->shape[2], W = v->shape[3];
    std::vector<double> s(static_cast<std::size_t>(K * F * T * H * W), 0.0);
    for (std::int64_t k = 0; k < K; ++k)
        for (std::int64_t f = 0; f < F; ++f)
            for (std::int64_t t = 0; t < T; ++t)
                for (std::int64_t h = 0; h < H; ++h)
                    for (std::int64_t w = 0; w < W; ++w) {
                        double acc = 0.0;
                        for (std::int64_t c = 0; c < C; ++c) {
                            acc += a->data[((c * K + k) * F + f) * T + t] *
                                   v->data[((c * K + k) * H + h) * W + w];
                        }
                        s[(((k * F + f) * T + t) * H + h) * W + w] = acc;
                    }
    return s;
}

// Loop recomputation of Eq. 2 from a raw [K,F,T,H,W] buffer.
double oracle_aggregate(const std::vector<double>& s, std::int64_t K, std::int64_t F,
                        std::int64_t T, std::int64_t H, std::int64_t W) {
    double total = 0.0;
    for (std::int64_t f = 0; f < F; ++f)
        for (std::int64_t t = 0; t < T; ++t) {
            double best = -std::numeric_limits<double>::infinity();
            for (std::int64_t k = 0; k < K; ++k)
                for (std::int64_t h = 0; h < H; ++h)
                    for (std::int64_t w = 0; w < W; ++w)
                        best = std::max(best, s[(((k * F + f) * T + t) * H + h) * W + w]);
            total += best;
        }
    return total / static_cast<double>(F * T);
}

double oracle_per_head(const std::vector<double>& s, std::int64_t k, std::int64_t K,
                       std::int64_t F, std::int64_t T, std::int64_t H, std::int64_t W) {
    double total = 0.0;
    for (std::int64_t f = 0; f < F; ++f)
        for (std::int64_t t = 0; t < T; ++t) {
            double best = -std::numeric_limits<double>::infinity();
            for (std::int64_t h = 0; h < H; ++h)
                for (std::int64_t w = 0; w < W; ++w)
                    best = std::max(best, s[(((k * F + f) * T + t) * H + h) * W + w]);
            total += best;
        }
    return total / static_cast<double>(F * T);
}

SimilarityVolume wrap(const TensorPtr& s) {
    SimilarityVolume vol;
    vol.s = s;
    return vol;
}

fs::path temp_file(const std::string& name) {
    fs::path dir = fs::temp_directory_path() / "dg_similarity_tests";
    fs::create_directories(dir);
    return dir / name;
}

} // namespace

TEST_CASE("similarity volume hand examples") {
    // C=2, everything else 1: dot product 1*3 + 2*4 = 11
    auto a = Tensor::create({2, 1, 1, 1}, {1, 2});
    auto v = Tensor::create({2, 1, 1, 1}, {3, 4});
    SimilarityVolume vol = similarity_volume(a, v, 5, 9);
    CHECK(vol.s->shape == std::vector<std::int64_t>{1, 1, 1, 1, 1});
    CHECK(vol.s->data[0] == 11.0);
    CHECK(vol.audio_id == 5);
    CHECK(vol.visual_id == 9);

    // zero audio -> zero volume
    Rng rng(7);
    auto z = similarity_volume(Tensor::zeros({2, 1, 1, 3}), rand_tensor({2, 1, 2, 2}, rng));
    for (double x : z.s->data) CHECK(x == 0.0);
}

TEST_CASE("similarity volume matches the naive-loop oracle") {
    Rng rng(11);
    // the spec's fixed case plus random geometry
    for (int trial = 0; trial < 20; ++trial) {
        const std::int64_t C = trial == 0 ? 4 : rng.uniform_int(1, 6);
        const std::int64_t K = trial == 0 ? 2 : rng.uniform_int(1, 3);
        const std::int64_t F = trial == 0 ? 1 : rng.uniform_int(1, 2);
        const std::int64_t T = trial == 0 ? 3 : rng.uniform_int(1, 5);
        const std::int64_t H = trial == 0 ? 2 : rng.uniform_int(1, 4);
        const std::int64_t W = trial == 0 ? 2 : rng.uniform_int(1, 4);
        auto a = rand_tensor({C, K, F, T}, rng);
        auto v = rand_tensor({C, K, H, W}, rng);
        auto s = similarity_volume(a, v).s;
        auto want = oracle_volume(a, v);
        REQUIRE(s->data.size() == want.size());
        double max_diff = 0.0;
        for (std::size_t i = 0; i < want.size(); ++i)
            max_diff = std::max(max_diff, std::abs(s->data[i] - want[i]));
        CHECK(max_diff < 1e-9);
    }
}

TEST_CASE("similarity volume validates C and K agreement") {
    Rng rng(13);
    CHECK_THROWS_AS(similarity_volume(rand_tensor({3, 2, 1, 4}, rng), rand_tensor({4, 2, 2, 2}, rng)),
                    ShapeMismatch);
    CHECK_THROWS_AS(similarity_volume(rand_tensor({3, 2, 1, 4}, rng), rand_tensor({3, 1, 2, 2}, rng)),
                    ShapeMismatch);
    CHECK_THROWS_AS(similarity_volume(rand_tensor({3, 2, 4}, rng), rand_tensor({3, 2, 2, 2}, rng)),
                    ShapeMismatch);
}

TEST_CASE("aggregate hand examples") {
    // constant volume
    auto c = wrap(Tensor::full({2, 1, 3, 2, 2}, -0.75));
    CHECK(aggregate(c)->item() == doctest::Approx(-0.75).epsilon(1e-12));

    // K=2, F=1, T=2, H=W=1: head 1 slices (1,3), head 2 (2,0)
    auto s = wrap(Tensor::create({2, 1, 2, 1, 1}, {1, 3, 2, 0}));
    CHECK(aggregate(s)->item() == doctest::Approx(2.5).epsilon(1e-12));

    // homogeneity for alpha = 3.7
    Rng rng(17);
    auto r = rand_tensor({2, 1, 4, 3, 3}, rng);
    CHECK(aggregate(wrap(scale(r, 3.7)))->item() ==
          doctest::Approx(3.7 * aggregate(wrap(r))->item()).epsilon(1e-12));
}

TEST_CASE("per-head hand examples") {
    auto s = wrap(Tensor::create({2, 1, 2, 1, 1}, {1, 3, 2, 0}));
    auto sk = per_head_scores(s);
    CHECK(sk->shape == std::vector<std::int64_t>{2});
    CHECK(sk->data[0] == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(sk->data[1] == doctest::Approx(1.0).epsilon(1e-12));

    // K=1: per-head equals aggregate
    Rng rng(19);
    auto r = rand_tensor({1, 1, 3, 2, 2}, rng);
    CHECK(per_head_scores(wrap(r))->data[0] ==
          doctest::Approx(aggregate(wrap(r))->item()).epsilon(1e-12));
}

TEST_CASE("aggregate and per-head match loop oracles on 100 random volumes") {
    Rng rng(23);
    for (int trial = 0; trial < 100; ++trial) {
        const std::int64_t K = rng.uniform_int(1, 3);
        const std::int64_t F = rng.uniform_int(1, 2);
        const std::int64_t T = rng.uniform_int(1, 5);
        const std::int64_t H = rng.uniform_int(1, 4);
        const std::int64_t W = rng.uniform_int(1, 4);
        auto s = rand_tensor({K, F, T, H, W}, rng);
        const double agg = aggregate(wrap(s))->item();
        CHECK(std::abs(agg - oracle_aggregate(s->data, K, F, T, H, W)) < 1e-9);
        auto sk = per_head_scores(wrap(s));
        double head_max = -std::numeric_limits<double>::infinity();
        for (std::int64_t k = 0; k < K; ++k) {
            CHECK(std::abs(sk->data[k] - oracle_per_head(s->data, k, K, F, T, H, W)) < 1e-9);
            head_max = std::max(head_max, sk->data[k]);
        }
        // mean of per-(f,t) head maxima dominates each head's own mean
        CHECK(head_max <= agg + 1e-12);
    }
}

TEST_CASE("mean head pooling averages heads before the spatial max") {
    // head 1 slices (1,3), head 2 (2,0): mean head volume = (1.5, 1.5) -> 1.5
    auto s = wrap(Tensor::create({2, 1, 2, 1, 1}, {1, 3, 2, 0}));
    CHECK(aggregate(s, HeadPool::Mean)->item() == doctest::Approx(1.5).epsilon(1e-12));

    // with K=1 both pools agree
    Rng rng(29);
    auto r = rand_tensor({1, 1, 4, 2, 3}, rng);
    CHECK(aggregate(wrap(r), HeadPool::Mean)->item() ==
          doctest::Approx(aggregate(wrap(r), HeadPool::Max)->item()).epsilon(1e-12));
}

TEST_CASE("aggregate monotonicity and permutation invariance") {
    Rng rng(31);
    auto s = rand_tensor({2, 1, 3, 2, 2}, rng);
    const double base = aggregate(wrap(s))->item();

    // bump single entries: never decreases
    for (int trial = 0; trial < 20; ++trial) {
        auto bumped = Tensor::create(s->shape, s->data);
        const std::size_t i = static_cast<std::size_t>(rng.uniform_below(bumped->data.size()));
        bumped->data[i] += rng.uniform(0.0, 2.0);
        CHECK(aggregate(wrap(bumped))->item() >= base - 1e-12);
    }

    // permute k and t indices: invariant
    const std::int64_t K = 2, T = 3, H = 2, W = 2;
    auto permuted = Tensor::zeros({2, 1, 3, 2, 2});
    const std::int64_t kperm[2] = {1, 0};
    const std::int64_t tperm[3] = {2, 0, 1};
    const std::int64_t hperm[2] = {1, 0};
    const std::int64_t wperm[2] = {1, 0};
    for (std::int64_t k = 0; k < K; ++k)
        for (std::int64_t t = 0; t < T; ++t)
            for (std::int64_t h = 0; h < H; ++h)
                for (std::int64_t w = 0; w < W; ++w) {
                    permuted->data[((kperm[k] * T + tperm[t]) * H + hperm[h]) * W + wperm[w]] =
                        s->data[((k * T + t) * H + h) * W + w];
                }
    CHECK(aggregate(wrap(permuted))->item() == doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("aggregate gradient is a per-(f,t) one-hot over (k,h,w) scaled by 1/FT") {
    Rng rng(37);
    const std::int64_t K = 2, F = 1, T = 4, H = 3, W = 3;
    auto s = rand_tensor({K, F, T, H, W}, rng, true);
    backward(aggregate(wrap(s)));

    const double cell = 1.0 / static_cast<double>(F * T);
    double total = 0.0;
    for (std::int64_t f = 0; f < F; ++f)
        for (std::int64_t t = 0; t < T; ++t) {
            int nonzeros = 0;
            for (std::int64_t k = 0; k < K; ++k)
                for (std::int64_t h = 0; h < H; ++h)
                    for (std::int64_t w = 0; w < W; ++w) {
                        const double g = s->grad[(((k * F + f) * T + t) * H + h) * W + w];
                        if (g != 0.0) {
                            ++nonzeros;
                            CHECK(g == doctest::Approx(cell).epsilon(1e-12));
                        }
                        total += g;
                    }
            CHECK(nonzeros == 1);
        }
    CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("gradients flow through the volume to both feature tensors") {
    Rng rng(41);
    auto a = rand_tensor({3, 2, 1, 3}, rng);
    auto v = rand_tensor({3, 2, 2, 2}, rng);
    auto fa = [&](const TensorPtr& x) { return aggregate(similarity_volume(x, v)); };
    auto fv = [&](const TensorPtr& x) { return aggregate(similarity_volume(a, x)); };
    CHECK(grad_check(fa, a) < 1e-4);
    CHECK(grad_check(fv, v) < 1e-4);

    auto fh = [&](const TensorPtr& x) {
        return reduce_sum(per_head_scores(similarity_volume(x, v)), {0});
    };
    CHECK(grad_check(fh, a) < 1e-4);
}

TEST_CASE("batch score matrix matches per-pair recomputation") {
    Rng rng(43);
    const std::int64_t B = 3;
    std::vector<TensorPtr> audio, visual;
    for (std::int64_t i = 0; i < B; ++i) {
        audio.push_back(rand_tensor({4, 2, 1, 3}, rng));
        visual.push_back(rand_tensor({4, 2, 2, 2}, rng));
    }
    auto M = batch_score_matrix(audio, visual);
    CHECK(M->shape == std::vector<std::int64_t>{B, B});
    for (std::int64_t i = 0; i < B; ++i)
        for (std::int64_t j = 0; j < B; ++j) {
            CHECK(M->data[i * B + j] ==
                  aggregate(similarity_volume(audio[i], visual[j]))->item());
        }

    // B = 1
    auto single = batch_score_matrix({audio[0]}, {visual[0]});
    CHECK(single->shape == std::vector<std::int64_t>{1, 1});
    CHECK(single->data[0] == aggregate(similarity_volume(audio[0], visual[0]))->item());

    // shuffling visual order permutes columns identically
    std::vector<TensorPtr> swapped = {visual[2], visual[0], visual[1]};
    auto Ms = batch_score_matrix(audio, swapped);
    for (std::int64_t i = 0; i < B; ++i) {
        CHECK(Ms->data[i * B + 0] == M->data[i * B + 2]);
        CHECK(Ms->data[i * B + 1] == M->data[i * B + 0]);
        CHECK(Ms->data[i * B + 2] == M->data[i * B + 1]);
    }

    CHECK_THROWS_AS(batch_score_matrix({audio[0]}, {}), ShapeMismatch);
}

TEST_CASE("prompt heatmap hand examples") {
    // K=1, T=2, H=W=1, slices 1 and 3: full window -> 2.0
    auto s = wrap(Tensor::create({1, 1, 2, 1, 1}, {1, 3}));
    CHECK(prompt_heatmap(s, 0, 2)->data[0] == doctest::Approx(2.0).epsilon(1e-12));

    // single-t window returns that slice's head max exactly
    CHECK(prompt_heatmap(s, 1, 2)->data[0] == 3.0);

    // t-constant volume: full-window heatmap equals per-(h,w) head max
    auto v = Tensor::create({2, 1, 2, 1, 2}, {// k=0: t0 (4,1), t1 (4,1)
                                              4, 1, 4, 1,
                                              // k=1: t0 (2,5), t1 (2,5)
                                              2, 5, 2, 5});
    auto heat = prompt_heatmap(wrap(v), 0, 2);
    CHECK(heat->shape == std::vector<std::int64_t>{1, 2});
    CHECK(heat->data[0] == doctest::Approx(4.0).epsilon(1e-12));
    CHECK(heat->data[1] == doctest::Approx(5.0).epsilon(1e-12));

    CHECK_THROWS_AS(prompt_heatmap(s, 1, 1), EmptyWindow);
    CHECK_THROWS_AS(prompt_heatmap(s, 2, 1), EmptyWindow);
    CHECK_THROWS_AS(prompt_heatmap(s, 0, 3), EmptyWindow);
    CHECK_THROWS_AS(prompt_heatmap(s, -1, 2), EmptyWindow);
}

TEST_CASE("bilinear upsample") {
    // identity size
    Rng rng(47);
    auto m = rand_tensor({3, 4}, rng);
    auto same = upsample_bilinear(m, 3, 4);
    CHECK(same->data == m->data);

    // 1x1 map -> constant
    auto c = upsample_bilinear(Tensor::create({1, 1}, {0.3}), 4, 5);
    for (double v : c->data) CHECK(v == 0.3);

    // 2x2 [[0,1],[1,2]] -> 3x3 with corner alignment: center = 1.0
    auto small = Tensor::create({2, 2}, {0, 1, 1, 2});
    auto big = upsample_bilinear(small, 3, 3);
    CHECK(big->data[4] == doctest::Approx(1.0).epsilon(1e-12));
    // corners preserved
    CHECK(big->data[0] == 0.0);
    CHECK(big->data[2] == 1.0);
    CHECK(big->data[6] == 1.0);
    CHECK(big->data[8] == 2.0);
    // edge midpoints
    CHECK(big->data[1] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(big->data[3] == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("heatmap PGM export") {
    fs::path p = temp_file("heat.pgm");
    auto m = Tensor::create({2, 3}, {0.0, 0.5, 1.0, 1.5, 2.0, -1.0});
    write_heatmap_pgm(p.string(), m);

    std::ifstream is(p, std::ios::binary);
    std::string header;
    std::getline(is, header);
    CHECK(header == "P5");
    std::int64_t w, h, maxval;
    is >> w >> h >> maxval;
    CHECK(w == 3);
    CHECK(h == 2);
    CHECK(maxval == 255);
    is.get(); // single whitespace after maxval
    std::vector<unsigned char> pixels(6);
    is.read(reinterpret_cast<char*>(pixels.data()), 6);
    REQUIRE(bool(is));
    // min -> 0, max -> 255, linear in between: (v - (-1)) / 3 * 255
    CHECK(pixels[5] == 0);
    CHECK(pixels[4] == 255);
    CHECK(pixels[0] == static_cast<unsigned char>(std::lround(255.0 / 3.0)));

    std::ifstream sc(p.string() + ".json");
    nlohmann::json sidecar;
    sc >> sidecar;
    CHECK(sidecar.at("min").get<double>() == -1.0);
    CHECK(sidecar.at("max").get<double>() == 2.0);

    // constant map: mid-gray pixels, sidecar min == max
    fs::path pc = temp_file("flat.pgm");
    write_heatmap_pgm(pc.string(), Tensor::full({2, 2}, 0.7));
    std::ifstream isc(pc, std::ios::binary);
    std::string all(std::istreambuf_iterator<char>(isc), {});
    for (std::size_t i = all.size() - 4; i < all.size(); ++i) {
        CHECK(static_cast<unsigned char>(all[i]) == 128);
    }
}

TEST_CASE("batch score matrix keeps the graph alive for training") {
    Rng rng(53);
    std::vector<TensorPtr> audio = {rand_tensor({2, 1, 1, 2}, rng, true),
                                    rand_tensor({2, 1, 1, 2}, rng, true)};
    std::vector<TensorPtr> visual = {rand_tensor({2, 1, 2, 2}, rng, true),
                                     rand_tensor({2, 1, 2, 2}, rng, true)};
    auto M = batch_score_matrix(audio, visual);
    CHECK(M->requires_grad);
    backward(reduce_mean(M, {0, 1}));
    bool any = false;
    for (double g : audio[0]->grad)
        if (g != 0.0) any = true;
    CHECK(any);
}
