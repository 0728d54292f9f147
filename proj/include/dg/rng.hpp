#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

namespace dg {

// Deterministic counter-style generator built on the splitmix64 mixer.
// Every stream is derived, never shared: sub("name") and fork(index) return
// independent child generators without advancing the parent, so the same
// (seed, stream path) always yields the same draws regardless of call order
// elsewhere. This is what makes checkpoint resume and multi-worker corpus
// generation bit-reproducible.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(mix(seed ^ 0xD1B54A32D192ED03ULL)) {}

    std::uint64_t next_u64() {
        state_ += 0x9E3779B97F4A7C15ULL;
        return mix(state_);
    }

    // Child stream keyed by a label. Does not advance this generator.
    Rng sub(std::string_view name) const {
        std::uint64_t h = 0xCBF29CE484222325ULL; // FNV-1a
        for (char c : name) {
            h ^= static_cast<unsigned char>(c);
            h *= 0x100000001B3ULL;
        }
        return from_state(mix(state_ ^ mix(h)));
    }

    // Child stream keyed by an index (per-sample, per-step, ...).
    Rng fork(std::uint64_t index) const {
        return from_state(mix(state_ ^ mix(index + 0x9E3779B97F4A7C15ULL)));
    }

    // Uniform in [0, 1).
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Standard normal via Box-Muller; one draw consumes two words.
    double normal() {
        double u1 = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53; // (0, 1]
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925287 * u2);
    }

    // Uniform integer in [0, n). Rejection sampling keeps it exactly uniform.
    std::uint64_t uniform_below(std::uint64_t n) {
        if (n <= 1) return 0;
        const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
        std::uint64_t x;
        do {
            x = next_u64();
        } while (x >= limit);
        return x % n;
    }

    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi_inclusive) {
        return lo + static_cast<std::int64_t>(
                        uniform_below(static_cast<std::uint64_t>(hi_inclusive - lo + 1)));
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(uniform_below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    struct raw_tag {};
    Rng(raw_tag, std::uint64_t s) : state_(s) {}
    static Rng from_state(std::uint64_t s) { return Rng(raw_tag{}, s); }

    static std::uint64_t mix(std::uint64_t z) {
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    std::uint64_t state_;
};

} // namespace dg
