#include "dg/similarity.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

namespace dg {

SimilarityVolume similarity_volume(const TensorPtr& a, const TensorPtr& v,
                                   std::int64_t audio_id, std::int64_t visual_id) {
    if (a->shape.size() != 4 || v->shape.size() != 4) {
        throw ShapeMismatch("similarity_volume expects a [C,K,F,T] and v [C,K,H,W]");
    }
    const std::int64_t C = a->shape[0], K = a->shape[1], F = a->shape[2], T = a->shape[3];
    const std::int64_t H = v->shape[2], W = v->shape[3];
    if (v->shape[0] != C || v->shape[1] != K) {
        throw ShapeMismatch("similarity_volume: audio and visual disagree on C or K");
    }

    // Per head k: s_k[ft, hw] = a_k^T v_k with a_k = a[:,k,:,:] as [C, F*T]
    // and v_k = v[:,k,:,:] as [C, H*W]. The matmul is the blocked contraction.
    std::vector<TensorPtr> heads;
    heads.reserve(static_cast<std::size_t>(K));
    for (std::int64_t k = 0; k < K; ++k) {
        TensorPtr ak = reshape(slice(a, 1, k, 1), {C, F * T});
        TensorPtr vk = reshape(slice(v, 1, k, 1), {C, H * W});
        heads.push_back(reshape(matmul(transpose(ak), vk), {F, T, H, W}));
    }
    SimilarityVolume vol;
    vol.s = stack0(heads); // [K, F, T, H, W]
    vol.audio_id = audio_id;
    vol.visual_id = visual_id;
    return vol;
}

TensorPtr aggregate(const SimilarityVolume& vol, HeadPool pool) {
    if (pool == HeadPool::Max) {
        // max over (k,h,w) then mean over (f,t)
        return reduce_mean(reduce_max(vol.s, {0, 3, 4}), {0, 1});
    }
    // ablation: mean over heads, max over (h,w), mean over (f,t)
    TensorPtr head_mean = reduce_mean(vol.s, {0}); // [F,T,H,W]
    return reduce_mean(reduce_max(head_mean, {2, 3}), {0, 1});
}

TensorPtr per_head_scores(const SimilarityVolume& vol) {
    // max over (h,w) -> [K,F,T]; mean over (f,t) -> [K]
    return reduce_mean(reduce_max(vol.s, {3, 4}), {1, 2});
}

TensorPtr batch_score_matrix(const std::vector<TensorPtr>& audio,
                             const std::vector<TensorPtr>& visual, HeadPool pool) {
    if (audio.empty() || audio.size() != visual.size()) {
        throw ShapeMismatch("batch_score_matrix expects equal non-empty batches");
    }
    const std::int64_t B = static_cast<std::int64_t>(audio.size());
    std::vector<TensorPtr> entries;
    entries.reserve(static_cast<std::size_t>(B * B));
    for (std::int64_t i = 0; i < B; ++i) {
        for (std::int64_t j = 0; j < B; ++j) {
            entries.push_back(aggregate(similarity_volume(audio[i], visual[j], i, j), pool));
        }
    }
    return stack_scalars(entries, {B, B});
}

TensorPtr prompt_heatmap(const SimilarityVolume& vol, std::int64_t t_start, std::int64_t t_end) {
    const std::int64_t T = vol.s->shape[2];
    if (t_start < 0 || t_start >= t_end || t_end > T) {
        throw EmptyWindow("prompt window [" + std::to_string(t_start) + ", " +
                          std::to_string(t_end) + ") invalid for T = " + std::to_string(T));
    }
    TensorPtr head_max = reduce_max(vol.s, {0});                    // [F,T,H,W]
    TensorPtr window = slice(head_max, 1, t_start, t_end - t_start); // [F,win,H,W]
    return reduce_mean(window, {0, 1});                              // [H,W]
}

TensorPtr upsample_bilinear(const TensorPtr& map, std::int64_t out_h, std::int64_t out_w) {
    if (map->shape.size() != 2) throw ShapeMismatch("upsample_bilinear expects a [H,W] map");
    if (out_h < 1 || out_w < 1) throw ShapeMismatch("upsample_bilinear target must be >= 1x1");
    const std::int64_t H = map->shape[0], W = map->shape[1];

    NoGradGuard no_grad; // evaluation-only resize
    std::vector<double> out(static_cast<std::size_t>(out_h * out_w));
    const double sy = out_h > 1 ? static_cast<double>(H - 1) / static_cast<double>(out_h - 1) : 0.0;
    const double sx = out_w > 1 ? static_cast<double>(W - 1) / static_cast<double>(out_w - 1) : 0.0;
    for (std::int64_t y = 0; y < out_h; ++y) {
        const double fy = static_cast<double>(y) * sy;
        const std::int64_t y0 = std::min<std::int64_t>(static_cast<std::int64_t>(fy), H - 1);
        const std::int64_t y1 = std::min<std::int64_t>(y0 + 1, H - 1);
        const double wy = fy - static_cast<double>(y0);
        for (std::int64_t x = 0; x < out_w; ++x) {
            const double fx = static_cast<double>(x) * sx;
            const std::int64_t x0 = std::min<std::int64_t>(static_cast<std::int64_t>(fx), W - 1);
            const std::int64_t x1 = std::min<std::int64_t>(x0 + 1, W - 1);
            const double wx = fx - static_cast<double>(x0);
            const double v00 = map->data[static_cast<std::size_t>(y0 * W + x0)];
            const double v01 = map->data[static_cast<std::size_t>(y0 * W + x1)];
            const double v10 = map->data[static_cast<std::size_t>(y1 * W + x0)];
            const double v11 = map->data[static_cast<std::size_t>(y1 * W + x1)];
            out[static_cast<std::size_t>(y * out_w + x)] =
                (1 - wy) * ((1 - wx) * v00 + wx * v01) + wy * ((1 - wx) * v10 + wx * v11);
        }
    }
    return Tensor::create({out_h, out_w}, std::move(out));
}

void write_heatmap_pgm(const std::string& path, const TensorPtr& map) {
    if (map->shape.size() != 2) throw ShapeMismatch("write_heatmap_pgm expects a [H,W] map");
    const std::int64_t H = map->shape[0], W = map->shape[1];
    double lo = map->data[0], hi = map->data[0];
    for (double v : map->data) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }

    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot open heatmap for writing: " + path);
    os << "P5\n" << W << " " << H << "\n255\n";
    const double range = hi - lo;
    for (double v : map->data) {
        const double norm = range > 0 ? (v - lo) / range : 0.5;
        os.put(static_cast<char>(static_cast<unsigned char>(std::lround(norm * 255.0))));
    }
    if (!os) throw Error("heatmap write failed: " + path);

    std::ofstream sidecar(path + ".json");
    if (!sidecar) throw Error("cannot open heatmap sidecar for writing: " + path + ".json");
    sidecar << canonical_json(nlohmann::json{{"min", lo}, {"max", hi}});
}

} // namespace dg
