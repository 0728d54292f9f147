#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

#include "dg/error.hpp"
#include "dg/rng.hpp"

namespace dg {

struct Tensor;
using TensorPtr = std::shared_ptr<Tensor>;

// Thread-local switch for graph recording. Forward values are identical in
// both modes; recording only decides whether backward closures are attached.
struct GradMode {
    static bool enabled();
    static void set(bool on);
};

struct NoGradGuard {
    NoGradGuard() : prev_(GradMode::enabled()) { GradMode::set(false); }
    ~NoGradGuard() { GradMode::set(prev_); }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

// Dense row-major tensor holding 64-bit values, with an optional reverse-mode
// node attached. A rank-0 shape is a scalar. The recorded graph is the set of
// parent edges plus a vector-Jacobian closure per node; backward() walks it in
// reverse topological order exactly once.
struct Tensor : std::enable_shared_from_this<Tensor> {
    std::vector<std::int64_t> shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad; // empty until first touched by backward

    std::vector<TensorPtr> parents;
    // Called with this node's accumulated output gradient; scatters into the
    // parents' grad buffers. Empty for leaves.
    std::function<void(const std::vector<double>&)> vjp;

    std::int64_t numel() const {
        std::int64_t n = 1;
        for (auto d : shape) n *= d;
        return n;
    }

    double item() const;
    void ensure_grad();
    void zero_grad();

    static TensorPtr create(std::vector<std::int64_t> shape, std::vector<double> data,
                            bool requires_grad = false);
    static TensorPtr zeros(std::vector<std::int64_t> shape, bool requires_grad = false);
    static TensorPtr full(std::vector<std::int64_t> shape, double value,
                          bool requires_grad = false);
    static TensorPtr scalar(double value, bool requires_grad = false);
    static TensorPtr uniform(std::vector<std::int64_t> shape, Rng& rng, double lo, double hi,
                             bool requires_grad = false);
    static TensorPtr normal(std::vector<std::int64_t> shape, Rng& rng, double stddev,
                            bool requires_grad = false);
};

// Graph-node constructor shared by all ops: attaches parents and the vjp only
// when grad mode is on and some parent needs gradients.
TensorPtr make_node(std::vector<std::int64_t> shape, std::vector<double> data,
                    std::vector<TensorPtr> parents,
                    std::function<void(const std::vector<double>&)> vjp);

// ---- elementwise ----------------------------------------------------------

enum class Unary { Neg, Abs, Square, Relu, MinWithZero, MaxWithZero, Exp, Log };
enum class Binary { Add, Sub, Mul };

TensorPtr unary(Unary op, const TensorPtr& x);
// Binary ops broadcast with trailing-dimension alignment; ShapeMismatch when
// the shapes are not broadcast-compatible.
TensorPtr binary(Binary op, const TensorPtr& a, const TensorPtr& b);

inline TensorPtr add(const TensorPtr& a, const TensorPtr& b) { return binary(Binary::Add, a, b); }
inline TensorPtr sub(const TensorPtr& a, const TensorPtr& b) { return binary(Binary::Sub, a, b); }
inline TensorPtr mul(const TensorPtr& a, const TensorPtr& b) { return binary(Binary::Mul, a, b); }
inline TensorPtr neg(const TensorPtr& x) { return unary(Unary::Neg, x); }
inline TensorPtr abs(const TensorPtr& x) { return unary(Unary::Abs, x); }
inline TensorPtr square(const TensorPtr& x) { return unary(Unary::Square, x); }
inline TensorPtr relu(const TensorPtr& x) { return unary(Unary::Relu, x); }
inline TensorPtr min_with_zero(const TensorPtr& x) { return unary(Unary::MinWithZero, x); }
inline TensorPtr max_with_zero(const TensorPtr& x) { return unary(Unary::MaxWithZero, x); }
inline TensorPtr exp(const TensorPtr& x) { return unary(Unary::Exp, x); }
inline TensorPtr log(const TensorPtr& x) { return unary(Unary::Log, x); }

TensorPtr scale(const TensorPtr& x, double alpha);
TensorPtr add_scalar(const TensorPtr& x, double c);

// ---- linear algebra -------------------------------------------------------

// A[m,k] x B[k,n] -> [m,n].
TensorPtr matmul(const TensorPtr& a, const TensorPtr& b);

enum class Padding { Same, Valid };

// Cross-correlation (no kernel flip). 1-D: input [Cin, L], kernel
// [Cout, Cin, k]; 2-D: input [Cin, H, W], kernel [Cout, Cin, kh, kw].
// Same padding requires odd kernel dims and zero-fills so that each output
// spatial dim is ceil(in / stride); extra fill goes to the trailing side
// first. bias may be null, otherwise shape [Cout].
TensorPtr conv(const TensorPtr& input, const TensorPtr& kernel, const TensorPtr& bias,
               int spatial_rank, Padding padding, int stride = 1);

// Per-position normalization over axis 0 (the channel axis): gain and bias
// have shape [C].
TensorPtr layer_norm_channel(const TensorPtr& x, const TensorPtr& gain, const TensorPtr& bias,
                             double eps);

// ---- reductions and shape ops ---------------------------------------------

enum class Reduce { Sum, Mean, Max };

struct ReduceResult {
    TensorPtr value;
    // For Max: per output element, the linear index into the input of the
    // winning position. On exact ties the first (lowest) index wins, and the
    // gradient routes there.
    std::vector<std::int64_t> argmax;
};

ReduceResult reduce(Reduce op, const TensorPtr& x, std::vector<int> axes, bool keepdims = false);

inline TensorPtr reduce_sum(const TensorPtr& x, std::vector<int> axes, bool keepdims = false) {
    return reduce(Reduce::Sum, x, std::move(axes), keepdims).value;
}
inline TensorPtr reduce_mean(const TensorPtr& x, std::vector<int> axes, bool keepdims = false) {
    return reduce(Reduce::Mean, x, std::move(axes), keepdims).value;
}
inline TensorPtr reduce_max(const TensorPtr& x, std::vector<int> axes, bool keepdims = false) {
    return reduce(Reduce::Max, x, std::move(axes), keepdims).value;
}

TensorPtr reshape(const TensorPtr& x, std::vector<std::int64_t> shape);
TensorPtr slice(const TensorPtr& x, int axis, std::int64_t start, std::int64_t len);

// Rank-2 transpose: [M, N] -> [N, M].
TensorPtr transpose(const TensorPtr& x);

// Stacks equal-shape tensors along a new leading axis: P parts of shape S
// become [P, S...].
TensorPtr stack0(const std::vector<TensorPtr>& parts);
// Gathers elements by linear index into a rank-1 tensor; duplicate indices
// accumulate in the backward pass.
TensorPtr gather(const TensorPtr& x, std::vector<std::int64_t> linear_indices);
// Packs scalar tensors into one tensor of the given shape, routing gradients
// back element-by-element.
TensorPtr stack_scalars(const std::vector<TensorPtr>& scalars, std::vector<std::int64_t> shape);

// ---- autograd --------------------------------------------------------------

// root must be scalar (numel == 1). Accumulates into the grad buffers of every
// requires_grad tensor reachable from root.
void backward(const TensorPtr& root);

// Max over coordinates of |analytic - central difference| / max(|a|, |cd|, 1e-8).
// f must be a pure scalar function of x.
double grad_check(const std::function<TensorPtr(const TensorPtr&)>& f, const TensorPtr& x,
                  double h = 1e-5);

// ---- serialization ---------------------------------------------------------

enum class DType : std::uint8_t { F32 = 0, F64 = 1 };

// Layout: magic "DGT1", u32 rank, u64 dims[rank], u8 dtype, raw little-endian
// data. F32 tensors round values through float on write.
void write_tensor(std::ostream& os, const Tensor& t, DType dtype);
TensorPtr read_tensor(std::istream& is);

} // namespace dg
