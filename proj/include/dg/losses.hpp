#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "dg/config.hpp"
#include "dg/rng.hpp"
#include "dg/similarity.hpp"
#include "dg/tensor.hpp"

namespace dg {

// Symmetric InfoNCE over a [B,B] score matrix with positives on the diagonal.
// l_av contrasts each audio row against its visual negatives, l_va each visual
// column against its audio negatives; both are negative log-likelihoods scaled
// by 1/(2B) and computed via max-shifted log-sum-exp. gamma is the calibration
// scalar (kept in the graph). Throws NonFiniteScores on non-finite inputs.
std::pair<TensorPtr, TensorPtr> info_nce(const TensorPtr& M, const TensorPtr& gamma);

// Disentanglement: mean over volume positions and unordered head pairs of
// |s_k1 * s_k2|. Zero (constant) for K = 1.
TensorPtr l_dis(const SimilarityVolume& vol);

// Splice/silence suppression for one volume: sum(m * s^2) / sum(m broadcast),
// with the mask over T broadcast across (k,f,h,w); an all-zero mask gives 0.
TensorPtr l_splice(const SimilarityVolume& vol, const std::vector<double>& mask);

// Batch variant: one global weighted mean, i.e. the numerator and denominator
// sums run over every volume before the division.
TensorPtr l_splice_batch(const std::vector<SimilarityVolume>& vols,
                         const std::vector<std::vector<double>>& masks);

// Calibration floor: max(-ln(gamma), 0)^2. Throws NonPositiveGamma.
TensorPtr l_cal(const TensorPtr& gamma);

// One sampled coordinate of the non-negativity set Omega.
struct OmegaCoord {
    std::int64_t b, bp, k, f, t, h, w;
};

// n coordinates uniform with replacement over B x B x K x F x T x H x W.
std::vector<OmegaCoord> sample_omega(std::int64_t n, std::int64_t B, std::int64_t K,
                                     std::int64_t F, std::int64_t T, std::int64_t H,
                                     std::int64_t W, Rng& rng);

// (1/|Omega|) sum over sampled coordinates of min(s, 0)^2, where grid[b][bp]
// holds the volume for audio b against visual bp.
TensorPtr l_nonneg(const std::vector<std::vector<SimilarityVolume>>& grid,
                   const std::vector<OmegaCoord>& omega);

// Temporal smoothness: mean squared difference of t-adjacent activations.
// Zero (constant) for T = 1.
TensorPtr l_tv(const SimilarityVolume& vol);

struct LossWeights {
    double dis = 0.05;
    double splice = 0.01;
    double cal = 0.1;
    double nonneg = 0.01;
    double tv = 0.01;
};

// Term switches for the ablation harness; a disabled term contributes exactly
// zero and never enters the graph.
struct LossFlags {
    bool dis = true;
    bool splice = true;
    bool cal = true;
    bool nonneg = true;
    bool tv = true;

    static LossFlags from_disable_list(const std::vector<std::string>& disable);
};

// One training pair: featurized audio/visual plus the frame-level splice mask.
struct BatchPair {
    TensorPtr audio;                 // [C,K,F,T]
    TensorPtr visual;                // [C,K,H,W]
    std::vector<double> splice_mask; // length T, values in [0,1]
};

struct LossBreakdown {
    double l_av = 0, l_va = 0, l_dis = 0, l_splice = 0, l_cal = 0, l_nonneg = 0, l_tv = 0;
    double total = 0;
    double gamma = 0;
    LossWeights lambdas;
    TensorPtr total_tensor; // graph root for backward
};

// Assembles the combined objective over a batch. Builds every pairwise volume
// once, shares it between the score matrix and the regularizers, and returns
// the per-term values plus the differentiable total. Throws NonFiniteLoss if
// the total is not finite.
LossBreakdown total_loss(const std::vector<BatchPair>& batch, const TensorPtr& gamma,
                         const LossWeights& weights, const LossFlags& flags,
                         std::int64_t omega_count, Rng& omega_rng,
                         HeadPool pool = HeadPool::Max);

} // namespace dg
