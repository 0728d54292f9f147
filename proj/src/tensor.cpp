#include "dg/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <istream>
#include <limits>
#include <ostream>
#include <unordered_set>
#include <utility>

#include "detail_gemm.hpp"

static_assert(std::endian::native == std::endian::little,
              "tensor serialization assumes a little-endian host");

namespace dg {

namespace {

thread_local bool g_grad_mode = true;

std::int64_t product(const std::vector<std::int64_t>& shape) {
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string shape_str(const std::vector<std::int64_t>& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

// Trailing-dimension broadcast: align shapes on the right, each pair of dims
// must match or one of them be 1.
std::vector<std::int64_t> broadcast_shape(const std::vector<std::int64_t>& a,
                                          const std::vector<std::int64_t>& b) {
    const std::size_t r = std::max(a.size(), b.size());
    std::vector<std::int64_t> out(r);
    for (std::size_t i = 0; i < r; ++i) {
        const std::int64_t ad = i < r - a.size() ? 1 : a[i - (r - a.size())];
        const std::int64_t bd = i < r - b.size() ? 1 : b[i - (r - b.size())];
        if (ad == bd) {
            out[i] = ad;
        } else if (ad == 1) {
            out[i] = bd;
        } else if (bd == 1) {
            out[i] = ad;
        } else {
            throw ShapeMismatch("broadcast of " + shape_str(a) + " and " + shape_str(b));
        }
    }
    return out;
}

// Per-output-dim element strides into an operand, 0 where the operand
// broadcasts (dim missing or equal to 1).
std::vector<std::int64_t> broadcast_strides(const std::vector<std::int64_t>& shape,
                                            const std::vector<std::int64_t>& out) {
    std::vector<std::int64_t> strides(out.size(), 0);
    std::int64_t acc = 1;
    const std::size_t off = out.size() - shape.size();
    for (std::size_t i = shape.size(); i-- > 0;) {
        strides[off + i] = shape[i] == 1 ? 0 : acc;
        acc *= shape[i];
    }
    return strides;
}

// Walks every position of `dims` invoking fn(offset_a, offset_b) with the two
// operand offsets advanced odometer-style.
template <typename Fn>
void for_each_broadcast(const std::vector<std::int64_t>& dims,
                        const std::vector<std::int64_t>& sa,
                        const std::vector<std::int64_t>& sb, Fn&& fn) {
    const std::int64_t total = product(dims);
    const int r = static_cast<int>(dims.size());
    std::vector<std::int64_t> idx(r, 0);
    std::int64_t oa = 0, ob = 0;
    for (std::int64_t lin = 0; lin < total; ++lin) {
        fn(lin, oa, ob);
        for (int d = r - 1; d >= 0; --d) {
            ++idx[d];
            oa += sa[d];
            ob += sb[d];
            if (idx[d] < dims[d]) break;
            idx[d] = 0;
            oa -= sa[d] * dims[d];
            ob -= sb[d] * dims[d];
        }
    }
}

} // namespace

bool GradMode::enabled() { return g_grad_mode; }
void GradMode::set(bool on) { g_grad_mode = on; }

double Tensor::item() const {
    if (numel() != 1) throw Error("item() requires a single-element tensor, got " + shape_str(shape));
    return data[0];
}

void Tensor::ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
}

void Tensor::zero_grad() { grad.assign(data.size(), 0.0); }

TensorPtr Tensor::create(std::vector<std::int64_t> shape, std::vector<double> data,
                         bool requires_grad) {
    for (auto d : shape) {
        if (d < 0) throw ShapeMismatch("negative dimension in " + shape_str(shape));
    }
    if (product(shape) != static_cast<std::int64_t>(data.size())) {
        throw ShapeMismatch("shape " + shape_str(shape) + " does not match data length " +
                            std::to_string(data.size()));
    }
    auto t = std::make_shared<Tensor>();
    t->shape = std::move(shape);
    t->data = std::move(data);
    t->requires_grad = requires_grad;
    return t;
}

TensorPtr Tensor::zeros(std::vector<std::int64_t> shape, bool requires_grad) {
    auto n = product(shape);
    return create(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), 0.0),
                  requires_grad);
}

TensorPtr Tensor::full(std::vector<std::int64_t> shape, double value, bool requires_grad) {
    auto n = product(shape);
    return create(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), value),
                  requires_grad);
}

TensorPtr Tensor::scalar(double value, bool requires_grad) {
    return create({}, {value}, requires_grad);
}

TensorPtr Tensor::uniform(std::vector<std::int64_t> shape, Rng& rng, double lo, double hi,
                          bool requires_grad) {
    auto n = product(shape);
    std::vector<double> d(static_cast<std::size_t>(n));
    for (auto& v : d) v = rng.uniform(lo, hi);
    return create(std::move(shape), std::move(d), requires_grad);
}

TensorPtr Tensor::normal(std::vector<std::int64_t> shape, Rng& rng, double stddev,
                         bool requires_grad) {
    auto n = product(shape);
    std::vector<double> d(static_cast<std::size_t>(n));
    for (auto& v : d) v = rng.normal() * stddev;
    return create(std::move(shape), std::move(d), requires_grad);
}

TensorPtr make_node(std::vector<std::int64_t> shape, std::vector<double> data,
                    std::vector<TensorPtr> parents,
                    std::function<void(const std::vector<double>&)> vjp) {
    auto t = Tensor::create(std::move(shape), std::move(data), false);
    if (g_grad_mode) {
        bool any = false;
        for (const auto& p : parents) {
            if (p && p->requires_grad) {
                any = true;
                break;
            }
        }
        if (any) {
            t->requires_grad = true;
            t->parents = std::move(parents);
            t->vjp = std::move(vjp);
        }
    }
    return t;
}

// ---- elementwise ------------------------------------------------------------

TensorPtr unary(Unary op, const TensorPtr& x) {
    const auto n = x->data.size();
    std::vector<double> out(n);
    switch (op) {
        case Unary::Neg:
            for (std::size_t i = 0; i < n; ++i) out[i] = -x->data[i];
            break;
        case Unary::Abs:
            for (std::size_t i = 0; i < n; ++i) out[i] = std::abs(x->data[i]);
            break;
        case Unary::Square:
            for (std::size_t i = 0; i < n; ++i) out[i] = x->data[i] * x->data[i];
            break;
        case Unary::Relu:
        case Unary::MaxWithZero:
            for (std::size_t i = 0; i < n; ++i) out[i] = x->data[i] > 0.0 ? x->data[i] : 0.0;
            break;
        case Unary::MinWithZero:
            for (std::size_t i = 0; i < n; ++i) out[i] = x->data[i] < 0.0 ? x->data[i] : 0.0;
            break;
        case Unary::Exp:
            for (std::size_t i = 0; i < n; ++i) out[i] = std::exp(x->data[i]);
            break;
        case Unary::Log:
            for (std::size_t i = 0; i < n; ++i) out[i] = std::log(x->data[i]);
            break;
    }
    TensorPtr xp = x;
    std::vector<double> saved = op == Unary::Exp ? out : std::vector<double>{};
    return make_node(x->shape, std::move(out), {x},
                     [op, xp, saved = std::move(saved)](const std::vector<double>& g) {
                         if (!xp->requires_grad) return;
                         auto& gx = xp->grad;
                         const auto& v = xp->data;
                         switch (op) {
                             case Unary::Neg:
                                 for (std::size_t i = 0; i < g.size(); ++i) gx[i] -= g[i];
                                 break;
                             case Unary::Abs:
                                 // subgradient 0 at 0
                                 for (std::size_t i = 0; i < g.size(); ++i)
                                     gx[i] += g[i] * (v[i] > 0.0 ? 1.0 : v[i] < 0.0 ? -1.0 : 0.0);
                                 break;
                             case Unary::Square:
                                 for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * 2.0 * v[i];
                                 break;
                             case Unary::Relu:
                             case Unary::MaxWithZero:
                                 for (std::size_t i = 0; i < g.size(); ++i)
                                     if (v[i] > 0.0) gx[i] += g[i];
                                 break;
                             case Unary::MinWithZero:
                                 for (std::size_t i = 0; i < g.size(); ++i)
                                     if (v[i] < 0.0) gx[i] += g[i];
                                 break;
                             case Unary::Exp:
                                 for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * saved[i];
                                 break;
                             case Unary::Log:
                                 for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] / v[i];
                                 break;
                         }
                     });
}

TensorPtr binary(Binary op, const TensorPtr& a, const TensorPtr& b) {
    auto out_shape = broadcast_shape(a->shape, b->shape);
    const std::int64_t total = product(out_shape);
    std::vector<double> out(static_cast<std::size_t>(total));

    if (a->shape == b->shape) { // fast path, no odometer
        const auto& av = a->data;
        const auto& bv = b->data;
        switch (op) {
            case Binary::Add:
                for (std::int64_t i = 0; i < total; ++i) out[i] = av[i] + bv[i];
                break;
            case Binary::Sub:
                for (std::int64_t i = 0; i < total; ++i) out[i] = av[i] - bv[i];
                break;
            case Binary::Mul:
                for (std::int64_t i = 0; i < total; ++i) out[i] = av[i] * bv[i];
                break;
        }
    } else {
        const auto sa = broadcast_strides(a->shape, out_shape);
        const auto sb = broadcast_strides(b->shape, out_shape);
        const auto& av = a->data;
        const auto& bv = b->data;
        switch (op) {
            case Binary::Add:
                for_each_broadcast(out_shape, sa, sb,
                                   [&](std::int64_t lin, std::int64_t oa, std::int64_t ob) {
                                       out[lin] = av[oa] + bv[ob];
                                   });
                break;
            case Binary::Sub:
                for_each_broadcast(out_shape, sa, sb,
                                   [&](std::int64_t lin, std::int64_t oa, std::int64_t ob) {
                                       out[lin] = av[oa] - bv[ob];
                                   });
                break;
            case Binary::Mul:
                for_each_broadcast(out_shape, sa, sb,
                                   [&](std::int64_t lin, std::int64_t oa, std::int64_t ob) {
                                       out[lin] = av[oa] * bv[ob];
                                   });
                break;
        }
    }

    TensorPtr ap = a, bp = b;
    auto oshape = out_shape;
    return make_node(
        std::move(out_shape), std::move(out), {a, b},
        [op, ap, bp, oshape](const std::vector<double>& g) {
            const bool ga = ap->requires_grad;
            const bool gb = bp->requires_grad;
            if (ap->shape == bp->shape) {
                for (std::size_t i = 0; i < g.size(); ++i) {
                    switch (op) {
                        case Binary::Add:
                            if (ga) ap->grad[i] += g[i];
                            if (gb) bp->grad[i] += g[i];
                            break;
                        case Binary::Sub:
                            if (ga) ap->grad[i] += g[i];
                            if (gb) bp->grad[i] -= g[i];
                            break;
                        case Binary::Mul:
                            if (ga) ap->grad[i] += g[i] * bp->data[i];
                            if (gb) bp->grad[i] += g[i] * ap->data[i];
                            break;
                    }
                }
                return;
            }
            const auto sa = broadcast_strides(ap->shape, oshape);
            const auto sb = broadcast_strides(bp->shape, oshape);
            for_each_broadcast(oshape, sa, sb,
                               [&](std::int64_t lin, std::int64_t oa, std::int64_t ob) {
                                   switch (op) {
                                       case Binary::Add:
                                           if (ga) ap->grad[oa] += g[lin];
                                           if (gb) bp->grad[ob] += g[lin];
                                           break;
                                       case Binary::Sub:
                                           if (ga) ap->grad[oa] += g[lin];
                                           if (gb) bp->grad[ob] -= g[lin];
                                           break;
                                       case Binary::Mul:
                                           if (ga) ap->grad[oa] += g[lin] * bp->data[ob];
                                           if (gb) bp->grad[ob] += g[lin] * ap->data[oa];
                                           break;
                                   }
                               });
        });
}

TensorPtr scale(const TensorPtr& x, double alpha) {
    std::vector<double> out(x->data.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x->data[i] * alpha;
    TensorPtr xp = x;
    return make_node(x->shape, std::move(out), {x}, [xp, alpha](const std::vector<double>& g) {
        if (!xp->requires_grad) return;
        for (std::size_t i = 0; i < g.size(); ++i) xp->grad[i] += g[i] * alpha;
    });
}

TensorPtr add_scalar(const TensorPtr& x, double c) {
    std::vector<double> out(x->data.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x->data[i] + c;
    TensorPtr xp = x;
    return make_node(x->shape, std::move(out), {x}, [xp](const std::vector<double>& g) {
        if (!xp->requires_grad) return;
        for (std::size_t i = 0; i < g.size(); ++i) xp->grad[i] += g[i];
    });
}

// ---- matmul -----------------------------------------------------------------

TensorPtr matmul(const TensorPtr& a, const TensorPtr& b) {
    if (a->shape.size() != 2 || b->shape.size() != 2 || a->shape[1] != b->shape[0]) {
        throw ShapeMismatch("matmul of " + shape_str(a->shape) + " and " + shape_str(b->shape));
    }
    const std::int64_t m = a->shape[0], k = a->shape[1], n = b->shape[1];
    std::vector<double> out(static_cast<std::size_t>(m * n));
    detail::gemm(false, false, m, n, k, a->data.data(), b->data.data(), out.data(), false);
    TensorPtr ap = a, bp = b;
    return make_node({m, n}, std::move(out), {a, b},
                     [ap, bp, m, k, n](const std::vector<double>& g) {
                         if (ap->requires_grad) // dA = G * B^T
                             detail::gemm(false, true, m, k, n, g.data(), bp->data.data(),
                                          ap->grad.data(), true);
                         if (bp->requires_grad) // dB = A^T * G
                             detail::gemm(true, false, k, n, m, ap->data.data(), g.data(),
                                          bp->grad.data(), true);
                     });
}

// ---- convolution ------------------------------------------------------------

namespace {

struct ConvPlan {
    std::int64_t cin, cout, h, w, kh, kw, ho, wo, pad_top, pad_left, stride;
};

// col is [cin*kh*kw, ho*wo]
void im2col(const ConvPlan& p, const double* input, double* col) {
    const std::int64_t owo = p.ho * p.wo;
    for (std::int64_t c = 0; c < p.cin; ++c) {
        const double* in_c = input + c * p.h * p.w;
        for (std::int64_t i = 0; i < p.kh; ++i) {
            for (std::int64_t j = 0; j < p.kw; ++j) {
                double* row = col + ((c * p.kh + i) * p.kw + j) * owo;
                for (std::int64_t oh = 0; oh < p.ho; ++oh) {
                    const std::int64_t ih = oh * p.stride - p.pad_top + i;
                    double* dst = row + oh * p.wo;
                    if (ih < 0 || ih >= p.h) {
                        std::fill(dst, dst + p.wo, 0.0);
                        continue;
                    }
                    const double* src = in_c + ih * p.w;
                    for (std::int64_t ow = 0; ow < p.wo; ++ow) {
                        const std::int64_t iw = ow * p.stride - p.pad_left + j;
                        dst[ow] = (iw < 0 || iw >= p.w) ? 0.0 : src[iw];
                    }
                }
            }
        }
    }
}

void col2im_accumulate(const ConvPlan& p, const double* col, double* dinput) {
    const std::int64_t owo = p.ho * p.wo;
    for (std::int64_t c = 0; c < p.cin; ++c) {
        double* din_c = dinput + c * p.h * p.w;
        for (std::int64_t i = 0; i < p.kh; ++i) {
            for (std::int64_t j = 0; j < p.kw; ++j) {
                const double* row = col + ((c * p.kh + i) * p.kw + j) * owo;
                for (std::int64_t oh = 0; oh < p.ho; ++oh) {
                    const std::int64_t ih = oh * p.stride - p.pad_top + i;
                    if (ih < 0 || ih >= p.h) continue;
                    const double* src = row + oh * p.wo;
                    double* dst = din_c + ih * p.w;
                    for (std::int64_t ow = 0; ow < p.wo; ++ow) {
                        const std::int64_t iw = ow * p.stride - p.pad_left + j;
                        if (iw >= 0 && iw < p.w) dst[iw] += src[ow];
                    }
                }
            }
        }
    }
}

} // namespace

TensorPtr conv(const TensorPtr& input, const TensorPtr& kernel, const TensorPtr& bias,
               int spatial_rank, Padding padding, int stride) {
    if (spatial_rank != 1 && spatial_rank != 2) throw ShapeMismatch("conv spatial_rank must be 1 or 2");
    if (stride < 1) throw ShapeMismatch("conv stride must be >= 1");
    const std::size_t in_rank = static_cast<std::size_t>(spatial_rank) + 1;
    const std::size_t k_rank = static_cast<std::size_t>(spatial_rank) + 2;
    if (input->shape.size() != in_rank || kernel->shape.size() != k_rank) {
        throw ShapeMismatch("conv input " + shape_str(input->shape) + " kernel " +
                            shape_str(kernel->shape));
    }

    // 1-D is handled as 2-D with a unit height.
    ConvPlan p{};
    p.stride = stride;
    p.cin = input->shape[0];
    p.cout = kernel->shape[0];
    if (kernel->shape[1] != p.cin) {
        throw ShapeMismatch("conv channel mismatch: input " + shape_str(input->shape) +
                            " kernel " + shape_str(kernel->shape));
    }
    if (spatial_rank == 1) {
        p.h = 1;
        p.w = input->shape[1];
        p.kh = 1;
        p.kw = kernel->shape[2];
    } else {
        p.h = input->shape[1];
        p.w = input->shape[2];
        p.kh = kernel->shape[2];
        p.kw = kernel->shape[3];
    }
    if (bias && (bias->shape.size() != 1 || bias->shape[0] != p.cout)) {
        throw ShapeMismatch("conv bias must be [Cout]");
    }

    if (padding == Padding::Same) {
        if (p.kh % 2 == 0 || p.kw % 2 == 0) {
            throw ShapeMismatch("same padding requires odd kernel dims");
        }
        p.ho = (p.h + stride - 1) / stride;
        p.wo = (p.w + stride - 1) / stride;
        const std::int64_t pad_h = std::max<std::int64_t>(0, (p.ho - 1) * stride + p.kh - p.h);
        const std::int64_t pad_w = std::max<std::int64_t>(0, (p.wo - 1) * stride + p.kw - p.w);
        p.pad_top = pad_h / 2;
        p.pad_left = pad_w / 2;
    } else {
        if (p.kh > p.h || p.kw > p.w) {
            throw ShapeMismatch("valid conv kernel larger than input");
        }
        p.ho = (p.h - p.kh) / stride + 1;
        p.wo = (p.w - p.kw) / stride + 1;
        p.pad_top = 0;
        p.pad_left = 0;
    }

    const std::int64_t col_rows = p.cin * p.kh * p.kw;
    const std::int64_t owo = p.ho * p.wo;
    std::vector<double> col(static_cast<std::size_t>(col_rows * owo));
    im2col(p, input->data.data(), col.data());

    std::vector<double> out(static_cast<std::size_t>(p.cout * owo));
    detail::gemm(false, false, p.cout, owo, col_rows, kernel->data.data(), col.data(), out.data(),
                 false);
    if (bias) {
        for (std::int64_t c = 0; c < p.cout; ++c) {
            const double bv = bias->data[c];
            double* row = out.data() + c * owo;
            for (std::int64_t i = 0; i < owo; ++i) row[i] += bv;
        }
    }

    std::vector<std::int64_t> out_shape =
        spatial_rank == 1 ? std::vector<std::int64_t>{p.cout, p.wo}
                          : std::vector<std::int64_t>{p.cout, p.ho, p.wo};

    TensorPtr in_p = input, k_p = kernel, b_p = bias;
    std::vector<TensorPtr> parents = {input, kernel};
    if (bias) parents.push_back(bias);
    // The col matrix is rebuilt in the backward pass instead of being captured;
    // it is the largest intermediate of the whole model.
    return make_node(std::move(out_shape), std::move(out), std::move(parents),
                     [p, in_p, k_p, b_p, col_rows, owo](const std::vector<double>& g) {
                         if (k_p->requires_grad || in_p->requires_grad) {
                             std::vector<double> col(static_cast<std::size_t>(col_rows * owo));
                             if (k_p->requires_grad) {
                                 im2col(p, in_p->data.data(), col.data());
                                 // dW = G * col^T
                                 detail::gemm(false, true, p.cout, col_rows, owo, g.data(),
                                              col.data(), k_p->grad.data(), true);
                             }
                             if (in_p->requires_grad) {
                                 // dcol = W^T * G, then scatter back
                                 detail::gemm(true, false, col_rows, owo, p.cout,
                                              k_p->data.data(), g.data(), col.data(), false);
                                 col2im_accumulate(p, col.data(), in_p->grad.data());
                             }
                         }
                         if (b_p && b_p->requires_grad) {
                             for (std::int64_t c = 0; c < p.cout; ++c) {
                                 double s = 0.0;
                                 const double* row = g.data() + c * owo;
                                 for (std::int64_t i = 0; i < owo; ++i) s += row[i];
                                 b_p->grad[c] += s;
                             }
                         }
                     });
}

// ---- layer norm --------------------------------------------------------------

TensorPtr layer_norm_channel(const TensorPtr& x, const TensorPtr& gain, const TensorPtr& bias,
                             double eps) {
    if (x->shape.empty()) throw ShapeMismatch("layer_norm_channel input must have a channel axis");
    const std::int64_t c_dim = x->shape[0];
    if (gain->numel() != c_dim || bias->numel() != c_dim) {
        throw ShapeMismatch("layer_norm_channel gain/bias must have shape [C]");
    }
    const std::int64_t positions = x->numel() / c_dim;
    std::vector<double> out(x->data.size());
    const auto& xv = x->data;
    for (std::int64_t pos = 0; pos < positions; ++pos) {
        double mu = 0.0;
        for (std::int64_t c = 0; c < c_dim; ++c) mu += xv[c * positions + pos];
        mu /= static_cast<double>(c_dim);
        double var = 0.0;
        for (std::int64_t c = 0; c < c_dim; ++c) {
            const double d = xv[c * positions + pos] - mu;
            var += d * d;
        }
        var /= static_cast<double>(c_dim);
        const double inv = 1.0 / std::sqrt(var + eps);
        for (std::int64_t c = 0; c < c_dim; ++c) {
            const double xhat = (xv[c * positions + pos] - mu) * inv;
            out[c * positions + pos] = xhat * gain->data[c] + bias->data[c];
        }
    }

    TensorPtr xp = x, gp = gain, bp = bias;
    return make_node(
        x->shape, std::move(out), {x, gain, bias},
        [xp, gp, bp, c_dim, positions, eps](const std::vector<double>& g) {
            const auto& xv = xp->data;
            const double cf = static_cast<double>(c_dim);
            std::vector<double> xhat(static_cast<std::size_t>(c_dim));
            for (std::int64_t pos = 0; pos < positions; ++pos) {
                double mu = 0.0;
                for (std::int64_t c = 0; c < c_dim; ++c) mu += xv[c * positions + pos];
                mu /= cf;
                double var = 0.0;
                for (std::int64_t c = 0; c < c_dim; ++c) {
                    const double d = xv[c * positions + pos] - mu;
                    var += d * d;
                }
                var /= cf;
                const double inv = 1.0 / std::sqrt(var + eps);
                for (std::int64_t c = 0; c < c_dim; ++c) {
                    xhat[c] = (xv[c * positions + pos] - mu) * inv;
                }
                if (gp->requires_grad || bp->requires_grad) {
                    for (std::int64_t c = 0; c < c_dim; ++c) {
                        const double gy = g[c * positions + pos];
                        if (gp->requires_grad) gp->grad[c] += gy * xhat[c];
                        if (bp->requires_grad) bp->grad[c] += gy;
                    }
                }
                if (xp->requires_grad) {
                    double m1 = 0.0, m2 = 0.0;
                    for (std::int64_t c = 0; c < c_dim; ++c) {
                        const double a = g[c * positions + pos] * gp->data[c];
                        m1 += a;
                        m2 += a * xhat[c];
                    }
                    m1 /= cf;
                    m2 /= cf;
                    for (std::int64_t c = 0; c < c_dim; ++c) {
                        const double a = g[c * positions + pos] * gp->data[c];
                        xp->grad[c * positions + pos] += inv * (a - m1 - xhat[c] * m2);
                    }
                }
            }
        });
}

// ---- reductions ----------------------------------------------------------------

ReduceResult reduce(Reduce op, const TensorPtr& x, std::vector<int> axes, bool keepdims) {
    const int rank = static_cast<int>(x->shape.size());
    std::vector<bool> reduced(static_cast<std::size_t>(rank), false);
    for (int a : axes) {
        if (a < 0 || a >= rank) throw ShapeMismatch("reduce axis out of range");
        if (reduced[a]) throw ShapeMismatch("reduce axes must be distinct");
        reduced[a] = true;
        if (x->shape[a] == 0) throw EmptyReduction("reduce over axis of size 0");
    }

    std::vector<std::int64_t> out_shape;
    for (int d = 0; d < rank; ++d) {
        if (reduced[d]) {
            if (keepdims) out_shape.push_back(1);
        } else {
            out_shape.push_back(x->shape[d]);
        }
    }
    const std::int64_t out_total = product(out_shape);
    std::int64_t count = 1;
    for (int d = 0; d < rank; ++d)
        if (reduced[d]) count *= x->shape[d];

    // Per input dim, the element stride into the output (0 on reduced dims).
    std::vector<std::int64_t> out_stride(static_cast<std::size_t>(rank), 0);
    {
        std::int64_t acc = 1;
        for (int d = rank; d-- > 0;) {
            if (!reduced[d]) {
                out_stride[d] = acc;
                acc *= x->shape[d];
            }
        }
    }

    const std::int64_t in_total = x->numel();
    std::vector<double> out(static_cast<std::size_t>(out_total),
                            op == Reduce::Max ? -std::numeric_limits<double>::infinity() : 0.0);
    std::vector<std::int64_t> argmax;
    if (op == Reduce::Max) argmax.assign(static_cast<std::size_t>(out_total), -1);

    {
        std::vector<std::int64_t> idx(static_cast<std::size_t>(rank), 0);
        std::int64_t o = 0;
        for (std::int64_t lin = 0; lin < in_total; ++lin) {
            const double v = x->data[lin];
            if (op == Reduce::Max) {
                if (v > out[o]) { // strict: first max wins on ties
                    out[o] = v;
                    argmax[o] = lin;
                }
            } else {
                out[o] += v;
            }
            for (int d = rank - 1; d >= 0; --d) {
                ++idx[d];
                o += out_stride[d];
                if (idx[d] < x->shape[d]) break;
                idx[d] = 0;
                o -= out_stride[d] * x->shape[d];
            }
        }
    }
    if (op == Reduce::Mean) {
        const double inv = 1.0 / static_cast<double>(count);
        for (auto& v : out) v *= inv;
    }

    TensorPtr xp = x;
    auto xshape = x->shape;
    TensorPtr value;
    if (op == Reduce::Max) {
        auto arg_copy = argmax;
        value = make_node(std::move(out_shape), std::move(out), {x},
                          [xp, arg = std::move(arg_copy)](const std::vector<double>& g) {
                              if (!xp->requires_grad) return;
                              for (std::size_t o = 0; o < g.size(); ++o) xp->grad[arg[o]] += g[o];
                          });
    } else {
        const double w = op == Reduce::Mean ? 1.0 / static_cast<double>(count) : 1.0;
        auto ostride = out_stride;
        value = make_node(std::move(out_shape), std::move(out), {x},
                          [xp, xshape, ostride, w, rank](const std::vector<double>& g) {
                              if (!xp->requires_grad) return;
                              std::vector<std::int64_t> idx(static_cast<std::size_t>(rank), 0);
                              std::int64_t o = 0;
                              const std::int64_t n = xp->numel();
                              for (std::int64_t lin = 0; lin < n; ++lin) {
                                  xp->grad[lin] += g[o] * w;
                                  for (int d = rank - 1; d >= 0; --d) {
                                      ++idx[d];
                                      o += ostride[d];
                                      if (idx[d] < xshape[d]) break;
                                      idx[d] = 0;
                                      o -= ostride[d] * xshape[d];
                                  }
                              }
                          });
    }
    return {value, std::move(argmax)};
}

// ---- shape ops -------------------------------------------------------------------

TensorPtr reshape(const TensorPtr& x, std::vector<std::int64_t> shape) {
    if (product(shape) != x->numel()) {
        throw ShapeMismatch("reshape " + shape_str(x->shape) + " -> " + shape_str(shape));
    }
    TensorPtr xp = x;
    return make_node(std::move(shape), x->data, {x}, [xp](const std::vector<double>& g) {
        if (!xp->requires_grad) return;
        for (std::size_t i = 0; i < g.size(); ++i) xp->grad[i] += g[i];
    });
}

TensorPtr slice(const TensorPtr& x, int axis, std::int64_t start, std::int64_t len) {
    const int rank = static_cast<int>(x->shape.size());
    if (axis < 0 || axis >= rank) throw ShapeMismatch("slice axis out of range");
    if (start < 0 || len < 0 || start + len > x->shape[axis]) {
        throw OutOfBounds("slice [" + std::to_string(start) + ", " + std::to_string(start + len) +
                          ") exceeds axis of size " + std::to_string(x->shape[axis]));
    }
    std::int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= x->shape[d];
    for (int d = axis + 1; d < rank; ++d) inner *= x->shape[d];
    const std::int64_t in_axis = x->shape[axis];

    auto out_shape = x->shape;
    out_shape[axis] = len;
    std::vector<double> out(static_cast<std::size_t>(outer * len * inner));
    for (std::int64_t ou = 0; ou < outer; ++ou) {
        const double* src = x->data.data() + (ou * in_axis + start) * inner;
        double* dst = out.data() + ou * len * inner;
        std::copy(src, src + len * inner, dst);
    }

    TensorPtr xp = x;
    return make_node(std::move(out_shape), std::move(out), {x},
                     [xp, outer, inner, len, in_axis, start](const std::vector<double>& g) {
                         if (!xp->requires_grad) return;
                         for (std::int64_t ou = 0; ou < outer; ++ou) {
                             const double* src = g.data() + ou * len * inner;
                             double* dst = xp->grad.data() + (ou * in_axis + start) * inner;
                             for (std::int64_t i = 0; i < len * inner; ++i) dst[i] += src[i];
                         }
                     });
}

TensorPtr transpose(const TensorPtr& x) {
    if (x->shape.size() != 2) throw ShapeMismatch("transpose expects a rank-2 tensor");
    const std::int64_t m = x->shape[0], n = x->shape[1];
    std::vector<double> out(static_cast<std::size_t>(m * n));
    for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < n; ++j) out[j * m + i] = x->data[i * n + j];
    TensorPtr xp = x;
    return make_node({n, m}, std::move(out), {x}, [xp, m, n](const std::vector<double>& g) {
        if (!xp->requires_grad) return;
        for (std::int64_t i = 0; i < m; ++i)
            for (std::int64_t j = 0; j < n; ++j) xp->grad[i * n + j] += g[j * m + i];
    });
}

TensorPtr stack0(const std::vector<TensorPtr>& parts) {
    if (parts.empty()) throw ShapeMismatch("stack0 needs at least one part");
    for (const auto& p : parts) {
        if (p->shape != parts[0]->shape) throw ShapeMismatch("stack0 parts must share a shape");
    }
    const std::int64_t len = parts[0]->numel();
    std::vector<std::int64_t> shape;
    shape.reserve(parts[0]->shape.size() + 1);
    shape.push_back(static_cast<std::int64_t>(parts.size()));
    shape.insert(shape.end(), parts[0]->shape.begin(), parts[0]->shape.end());
    std::vector<double> out(static_cast<std::size_t>(len) * parts.size());
    for (std::size_t p = 0; p < parts.size(); ++p) {
        std::copy(parts[p]->data.begin(), parts[p]->data.end(),
                  out.begin() + static_cast<std::int64_t>(p) * len);
    }
    auto parents = parts;
    return make_node(std::move(shape), std::move(out), std::move(parents),
                     [parts, len](const std::vector<double>& g) {
                         for (std::size_t p = 0; p < parts.size(); ++p) {
                             if (!parts[p]->requires_grad) continue;
                             const double* src = g.data() + static_cast<std::int64_t>(p) * len;
                             for (std::int64_t i = 0; i < len; ++i) parts[p]->grad[i] += src[i];
                         }
                     });
}

TensorPtr gather(const TensorPtr& x, std::vector<std::int64_t> linear_indices) {
    const std::int64_t n = x->numel();
    std::vector<double> out(linear_indices.size());
    for (std::size_t i = 0; i < linear_indices.size(); ++i) {
        if (linear_indices[i] < 0 || linear_indices[i] >= n) {
            throw OutOfBounds("gather index " + std::to_string(linear_indices[i]));
        }
        out[i] = x->data[linear_indices[i]];
    }
    TensorPtr xp = x;
    const std::int64_t m = static_cast<std::int64_t>(linear_indices.size());
    return make_node({m}, std::move(out), {x},
                     [xp, idx = std::move(linear_indices)](const std::vector<double>& g) {
                         if (!xp->requires_grad) return;
                         for (std::size_t i = 0; i < g.size(); ++i) xp->grad[idx[i]] += g[i];
                     });
}

TensorPtr stack_scalars(const std::vector<TensorPtr>& scalars, std::vector<std::int64_t> shape) {
    if (product(shape) != static_cast<std::int64_t>(scalars.size())) {
        throw ShapeMismatch("stack_scalars count does not match shape");
    }
    std::vector<double> out(scalars.size());
    for (std::size_t i = 0; i < scalars.size(); ++i) {
        if (scalars[i]->numel() != 1) throw ShapeMismatch("stack_scalars expects scalar tensors");
        out[i] = scalars[i]->data[0];
    }
    auto parents = scalars;
    return make_node(std::move(shape), std::move(out), std::move(parents),
                     [scalars](const std::vector<double>& g) {
                         for (std::size_t i = 0; i < g.size(); ++i) {
                             if (scalars[i]->requires_grad) scalars[i]->grad[0] += g[i];
                         }
                     });
}

// ---- backward ---------------------------------------------------------------------

void backward(const TensorPtr& root) {
    if (root->numel() != 1) throw NonScalarRoot("backward root must be scalar");
    if (!root->requires_grad) return;

    // Post-order DFS; reversed, children (consumers) come before parents.
    std::vector<Tensor*> order;
    std::unordered_set<Tensor*> visited;
    std::vector<std::pair<Tensor*, std::size_t>> stack;
    stack.emplace_back(root.get(), 0);
    visited.insert(root.get());
    while (!stack.empty()) {
        Tensor* node = stack.back().first;
        std::size_t& i = stack.back().second;
        if (i < node->parents.size()) {
            Tensor* p = node->parents[i].get();
            ++i;
            if (p->requires_grad && visited.insert(p).second) {
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root->ensure_grad();
    root->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Tensor* node = *it;
        if (!node->vjp) continue;
        for (auto& p : node->parents) {
            if (p->requires_grad) p->ensure_grad();
        }
        node->vjp(node->grad);
    }
}

double grad_check(const std::function<TensorPtr(const TensorPtr&)>& f, const TensorPtr& x,
                  double h) {
    auto leaf = Tensor::create(x->shape, x->data, true);
    TensorPtr y = f(leaf);
    if (y->numel() != 1) throw NonScalarRoot("grad_check expects a scalar function");
    leaf->zero_grad();
    backward(y);
    const std::vector<double> analytic = leaf->grad;

    double worst = 0.0;
    for (std::size_t i = 0; i < x->data.size(); ++i) {
        auto xp = Tensor::create(x->shape, x->data, false);
        auto xm = Tensor::create(x->shape, x->data, false);
        xp->data[i] += h;
        xm->data[i] -= h;
        double fp, fm;
        {
            NoGradGuard ng;
            fp = f(xp)->item();
            fm = f(xm)->item();
        }
        const double cd = (fp - fm) / (2.0 * h);
        const double denom = std::max({std::abs(analytic[i]), std::abs(cd), 1e-8});
        worst = std::max(worst, std::abs(analytic[i] - cd) / denom);
    }
    return worst;
}

// ---- serialization -----------------------------------------------------------------

namespace {

template <typename T>
void write_pod(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw CorruptFile("unexpected end of tensor data");
    return v;
}

} // namespace

void write_tensor(std::ostream& os, const Tensor& t, DType dtype) {
    os.write("DGT1", 4);
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) write_pod<std::uint64_t>(os, static_cast<std::uint64_t>(d));
    write_pod<std::uint8_t>(os, static_cast<std::uint8_t>(dtype));
    if (dtype == DType::F32) {
        std::vector<float> buf(t.data.size());
        for (std::size_t i = 0; i < t.data.size(); ++i) buf[i] = static_cast<float>(t.data[i]);
        os.write(reinterpret_cast<const char*>(buf.data()),
                 static_cast<std::streamsize>(buf.size() * sizeof(float)));
    } else {
        os.write(reinterpret_cast<const char*>(t.data.data()),
                 static_cast<std::streamsize>(t.data.size() * sizeof(double)));
    }
    if (!os) throw Error("tensor write failed");
}

TensorPtr read_tensor(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "DGT1", 4) != 0) throw CorruptFile("bad tensor magic");
    const auto rank = read_pod<std::uint32_t>(is);
    if (rank > 16) throw CorruptFile("implausible tensor rank");
    std::vector<std::int64_t> shape(rank);
    std::int64_t total = 1;
    for (auto& d : shape) {
        d = static_cast<std::int64_t>(read_pod<std::uint64_t>(is));
        if (d < 0 || d > (1LL << 32)) throw CorruptFile("implausible tensor dim");
        total *= d;
    }
    if (total > (1LL << 31)) throw CorruptFile("implausible tensor size");
    const auto code = read_pod<std::uint8_t>(is);
    std::vector<double> data(static_cast<std::size_t>(total));
    if (code == static_cast<std::uint8_t>(DType::F32)) {
        std::vector<float> buf(static_cast<std::size_t>(total));
        is.read(reinterpret_cast<char*>(buf.data()),
                static_cast<std::streamsize>(buf.size() * sizeof(float)));
        if (!is) throw CorruptFile("truncated tensor data");
        for (std::size_t i = 0; i < buf.size(); ++i) data[i] = static_cast<double>(buf[i]);
    } else if (code == static_cast<std::uint8_t>(DType::F64)) {
        is.read(reinterpret_cast<char*>(data.data()),
                static_cast<std::streamsize>(data.size() * sizeof(double)));
        if (!is) throw CorruptFile("truncated tensor data");
    } else {
        throw CorruptFile("unknown tensor dtype code");
    }
    return Tensor::create(std::move(shape), std::move(data));
}

} // namespace dg
