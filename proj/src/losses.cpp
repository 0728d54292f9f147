#include "dg/losses.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>

namespace dg {

namespace {

void check_finite(const TensorPtr& t, const char* what) {
    for (double v : t->data) {
        if (!std::isfinite(v)) throw NonFiniteScores(std::string(what) + " contains a non-finite value");
    }
}

// Stable log-sum-exp of a row or column strip, keeping the graph: the max is
// folded back in, and its tie routing does not disturb the gradient because
// d(lse)/dx_i = softmax_i regardless of which tied maximum is subtracted.
TensorPtr lse(const TensorPtr& strip) {
    TensorPtr m = reduce_max(strip, {0, 1});
    return add(log(reduce_sum(exp(sub(strip, m)), {0, 1})), m);
}

} // namespace

std::pair<TensorPtr, TensorPtr> info_nce(const TensorPtr& M, const TensorPtr& gamma) {
    if (M->shape.size() != 2 || M->shape[0] != M->shape[1]) {
        throw ShapeMismatch("info_nce expects a square [B,B] matrix");
    }
    if (gamma->numel() != 1) throw ShapeMismatch("info_nce expects a scalar gamma");
    check_finite(M, "score matrix");
    check_finite(gamma, "gamma");

    const std::int64_t B = M->shape[0];
    TensorPtr scores = mul(M, gamma);

    TensorPtr av_sum, va_sum;
    for (std::int64_t b = 0; b < B; ++b) {
        TensorPtr diag = reshape(gather(scores, {b * B + b}), {});
        TensorPtr row_term = sub(lse(slice(scores, 0, b, 1)), diag);
        TensorPtr col_term = sub(lse(slice(scores, 1, b, 1)), diag);
        av_sum = b == 0 ? row_term : add(av_sum, row_term);
        va_sum = b == 0 ? col_term : add(va_sum, col_term);
    }
    const double norm = 1.0 / (2.0 * static_cast<double>(B));
    return {scale(av_sum, norm), scale(va_sum, norm)};
}

TensorPtr l_dis(const SimilarityVolume& vol) {
    const std::int64_t K = vol.s->shape[0];
    if (K < 2) return Tensor::scalar(0.0);
    TensorPtr sum;
    std::int64_t pairs = 0;
    for (std::int64_t k1 = 0; k1 < K; ++k1) {
        for (std::int64_t k2 = k1 + 1; k2 < K; ++k2) {
            TensorPtr prod = abs(mul(slice(vol.s, 0, k1, 1), slice(vol.s, 0, k2, 1)));
            TensorPtr mean = reduce_mean(prod, {0, 1, 2, 3, 4});
            sum = pairs == 0 ? mean : add(sum, mean);
            ++pairs;
        }
    }
    return scale(sum, 1.0 / static_cast<double>(pairs));
}

namespace {

// Returns the weighted numerator sum(m * s^2) and the plain scalar denominator
// sum over the broadcast mask; shared by the single and batch splice variants.
std::pair<TensorPtr, double> splice_parts(const SimilarityVolume& vol,
                                          const std::vector<double>& mask) {
    const auto& sh = vol.s->shape; // [K,F,T,H,W]
    const std::int64_t T = sh[2];
    if (static_cast<std::int64_t>(mask.size()) != T) {
        throw ShapeMismatch("splice mask length does not match T");
    }
    double mask_sum = 0.0;
    for (double m : mask) {
        if (m < 0.0 || m > 1.0) throw InvalidConfig("splice mask values must lie in [0,1]");
        mask_sum += m;
    }
    TensorPtr m = Tensor::create({T, 1, 1}, std::vector<double>(mask));
    TensorPtr num = reduce_sum(mul(square(vol.s), m), {0, 1, 2, 3, 4});
    const double den = mask_sum * static_cast<double>(sh[0] * sh[1] * sh[3] * sh[4]);
    return {num, den};
}

} // namespace

TensorPtr l_splice(const SimilarityVolume& vol, const std::vector<double>& mask) {
    auto [num, den] = splice_parts(vol, mask);
    if (den == 0.0) return Tensor::scalar(0.0);
    return scale(num, 1.0 / den);
}

TensorPtr l_splice_batch(const std::vector<SimilarityVolume>& vols,
                         const std::vector<std::vector<double>>& masks) {
    if (vols.size() != masks.size()) throw ShapeMismatch("splice batch sizes disagree");
    TensorPtr num;
    double den = 0.0;
    for (std::size_t i = 0; i < vols.size(); ++i) {
        auto [n, d] = splice_parts(vols[i], masks[i]);
        num = i == 0 ? n : add(num, n);
        den += d;
    }
    if (vols.empty() || den == 0.0) return Tensor::scalar(0.0);
    return scale(num, 1.0 / den);
}

TensorPtr l_cal(const TensorPtr& gamma) {
    if (gamma->numel() != 1) throw ShapeMismatch("l_cal expects a scalar gamma");
    if (!(gamma->data[0] > 0.0)) {
        throw NonPositiveGamma("gamma must be positive, got " + std::to_string(gamma->data[0]));
    }
    return square(max_with_zero(neg(log(gamma))));
}

std::vector<OmegaCoord> sample_omega(std::int64_t n, std::int64_t B, std::int64_t K,
                                     std::int64_t F, std::int64_t T, std::int64_t H,
                                     std::int64_t W, Rng& rng) {
    std::vector<OmegaCoord> omega;
    omega.reserve(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        OmegaCoord c;
        c.b = static_cast<std::int64_t>(rng.uniform_below(static_cast<std::uint64_t>(B)));
        c.bp = static_cast<std::int64_t>(rng.uniform_below(static_cast<std::uint64_t>(B)));
        c.k = static_cast<std::int64_t>(rng.uniform_below(static_cast<std::uint64_t>(K)));
        c.f = static_cast<std::int64_t>(rng.uniform_below(static_cast<std::uint64_t>(F)));
        c.t = static_cast<std::int64_t>(rng.uniform_below(static_cast<std::uint64_t>(T)));
        c.h = static_cast<std::int64_t>(rng.uniform_below(static_cast<std::uint64_t>(H)));
        c.w = static_cast<std::int64_t>(rng.uniform_below(static_cast<std::uint64_t>(W)));
        omega.push_back(c);
    }
    return omega;
}

TensorPtr l_nonneg(const std::vector<std::vector<SimilarityVolume>>& grid,
                   const std::vector<OmegaCoord>& omega) {
    if (omega.empty()) return Tensor::scalar(0.0);
    const std::int64_t B = static_cast<std::int64_t>(grid.size());

    // Group the sampled coordinates by volume so each volume contributes one
    // gather; duplicates accumulate correctly inside the gather backward.
    std::map<std::pair<std::int64_t, std::int64_t>, std::vector<std::int64_t>> groups;
    for (const auto& c : omega) {
        if (c.b < 0 || c.b >= B || c.bp < 0 || c.bp >= B) {
            throw OutOfBounds("omega coordinate outside the batch");
        }
        const auto& sh = grid[c.b][c.bp].s->shape;
        if (c.k >= sh[0] || c.f >= sh[1] || c.t >= sh[2] || c.h >= sh[3] || c.w >= sh[4] ||
            c.k < 0 || c.f < 0 || c.t < 0 || c.h < 0 || c.w < 0) {
            throw OutOfBounds("omega coordinate outside the volume");
        }
        const std::int64_t idx = (((c.k * sh[1] + c.f) * sh[2] + c.t) * sh[3] + c.h) * sh[4] + c.w;
        groups[{c.b, c.bp}].push_back(idx);
    }

    TensorPtr sum;
    bool first = true;
    for (const auto& [key, idxs] : groups) {
        TensorPtr vals = gather(grid[key.first][key.second].s, idxs);
        TensorPtr part = reduce_sum(square(min_with_zero(vals)), {0});
        sum = first ? part : add(sum, part);
        first = false;
    }
    return scale(sum, 1.0 / static_cast<double>(omega.size()));
}

TensorPtr l_tv(const SimilarityVolume& vol) {
    const std::int64_t T = vol.s->shape[2];
    if (T < 2) return Tensor::scalar(0.0);
    TensorPtr diff = sub(slice(vol.s, 2, 1, T - 1), slice(vol.s, 2, 0, T - 1));
    return reduce_mean(square(diff), {0, 1, 2, 3, 4});
}

LossFlags LossFlags::from_disable_list(const std::vector<std::string>& disable) {
    LossFlags f;
    for (const auto& term : disable) {
        if (term == "dis") f.dis = false;
        else if (term == "splice") f.splice = false;
        else if (term == "cal") f.cal = false;
        else if (term == "nonneg") f.nonneg = false;
        else if (term == "tv") f.tv = false;
        else throw InvalidConfig("unknown loss term \"" + term + "\"");
    }
    return f;
}

LossBreakdown total_loss(const std::vector<BatchPair>& batch, const TensorPtr& gamma,
                         const LossWeights& weights, const LossFlags& flags,
                         std::int64_t omega_count, Rng& omega_rng, HeadPool pool) {
    if (batch.empty()) throw ShapeMismatch("total_loss needs a non-empty batch");
    const std::int64_t B = static_cast<std::int64_t>(batch.size());

    // Every pairwise volume once; positives sit on the diagonal.
    std::vector<std::vector<SimilarityVolume>> grid(static_cast<std::size_t>(B));
    std::vector<TensorPtr> entries;
    entries.reserve(static_cast<std::size_t>(B * B));
    for (std::int64_t i = 0; i < B; ++i) {
        grid[i].reserve(static_cast<std::size_t>(B));
        for (std::int64_t j = 0; j < B; ++j) {
            grid[i].push_back(similarity_volume(batch[i].audio, batch[j].visual, i, j));
            entries.push_back(aggregate(grid[i].back(), pool));
        }
    }
    TensorPtr M = stack_scalars(entries, {B, B});

    LossBreakdown out;
    out.lambdas = weights;
    out.gamma = gamma->data[0];

    auto [lav, lva] = info_nce(M, gamma);
    out.l_av = lav->item();
    out.l_va = lva->item();
    TensorPtr total = add(lav, lva);

    auto positive_mean = [&](const std::function<TensorPtr(const SimilarityVolume&)>& term) {
        TensorPtr sum;
        for (std::int64_t b = 0; b < B; ++b) {
            TensorPtr v = term(grid[b][b]);
            sum = b == 0 ? v : add(sum, v);
        }
        return scale(sum, 1.0 / static_cast<double>(B));
    };

    if (flags.dis) {
        TensorPtr t = positive_mean([](const SimilarityVolume& v) { return l_dis(v); });
        out.l_dis = t->item();
        total = add(total, scale(t, weights.dis));
    }
    if (flags.splice) {
        std::vector<SimilarityVolume> positives;
        std::vector<std::vector<double>> masks;
        for (std::int64_t b = 0; b < B; ++b) {
            positives.push_back(grid[b][b]);
            masks.push_back(batch[b].splice_mask);
        }
        TensorPtr t = l_splice_batch(positives, masks);
        out.l_splice = t->item();
        total = add(total, scale(t, weights.splice));
    }
    if (flags.cal) {
        TensorPtr t = l_cal(gamma);
        out.l_cal = t->item();
        total = add(total, scale(t, weights.cal));
    }
    if (flags.nonneg) {
        const auto& sh = grid[0][0].s->shape;
        auto omega = sample_omega(omega_count, B, sh[0], sh[1], sh[2], sh[3], sh[4], omega_rng);
        TensorPtr t = l_nonneg(grid, omega);
        out.l_nonneg = t->item();
        total = add(total, scale(t, weights.nonneg));
    }
    if (flags.tv) {
        TensorPtr t = positive_mean([](const SimilarityVolume& v) { return l_tv(v); });
        out.l_tv = t->item();
        total = add(total, scale(t, weights.tv));
    }

    out.total_tensor = total;
    out.total = total->item();
    if (!std::isfinite(out.total)) throw NonFiniteLoss("loss total is not finite");
    return out;
}

} // namespace dg
