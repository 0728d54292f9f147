#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dg/config.hpp"
#include "dg/tensor.hpp"

namespace dg {

// Dense audio-visual similarity volume for one (audio, visual) pair:
// s[k,f,t,h,w] = sum_c a[c,k,f,t] * v[c,k,h,w] (un-normalized inner products).
struct SimilarityVolume {
    TensorPtr s; // [K, F, T, H, W]
    std::int64_t audio_id = -1;
    std::int64_t visual_id = -1;
};

// a: [C,K,F,T], v: [C,K,H,W]; throws ShapeMismatch when C or K disagree.
SimilarityVolume similarity_volume(const TensorPtr& a, const TensorPtr& v,
                                   std::int64_t audio_id = -1, std::int64_t visual_id = -1);

// Scalar pair score: mean over (f,t) of the per-(f,t) pooled spatial/head max.
// Max pooling over (k,h,w) is the paper aggregation; Mean pools heads by
// averaging before the spatial max (the ablation variant).
TensorPtr aggregate(const SimilarityVolume& vol, HeadPool pool = HeadPool::Max);

// Per-head scores as a [K] tensor: S_k = mean over (f,t) of max over (h,w).
TensorPtr per_head_scores(const SimilarityVolume& vol);

// M[i,j] = aggregate(similarity_volume(a_i, v_j)) as a [B,B] tensor with the
// positive pairs on the diagonal.
TensorPtr batch_score_matrix(const std::vector<TensorPtr>& audio,
                             const std::vector<TensorPtr>& visual,
                             HeadPool pool = HeadPool::Max);

// Head-max heatmap averaged over f and the frame window [t_start, t_end).
// Window must be non-empty and inside [0, T]; throws EmptyWindow otherwise.
TensorPtr prompt_heatmap(const SimilarityVolume& vol, std::int64_t t_start, std::int64_t t_end);

// Bilinear resize of a [H,W] map to [out_h, out_w] with corner alignment:
// src coordinate = dst * (in-1)/(out-1); a single-pixel axis broadcasts.
TensorPtr upsample_bilinear(const TensorPtr& map, std::int64_t out_h, std::int64_t out_w);

// 8-bit binary PGM (P5) export of a [H,W] map, min-max normalized per map; a
// constant map renders mid-gray. The sidecar JSON (path + ".json") records the
// raw min/max for de-normalization.
void write_heatmap_pgm(const std::string& path, const TensorPtr& map);

} // namespace dg
