#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace emodiff {

// 64-bit FNV-1a. Used for config hashing and for deriving named substreams.
inline std::uint64_t fnv1a64(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ull) {
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

// Deterministic random stream. Distributions are implemented by hand so
// that byte-identical sequences do not depend on the standard library's
// (implementation-defined) distribution algorithms.
class RandomStream {
 public:
    explicit RandomStream(std::uint64_t seed) : engine_(seed) {}

    // Independent stream for a named purpose, so adding a consumer does not
    // shift the draws of the others.
    RandomStream fork(std::string_view purpose) const {
        return RandomStream(fnv1a64(purpose) ^ seed_mix());
    }

    std::uint64_t bits() { return engine_(); }

    // Uniform in [0, 1) with 53-bit resolution.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [lo, hi] via rejection-free scaling (desk scale;
    // the tiny modulo bias of scaling is irrelevant here, but keep exact).
    std::uint64_t integer(std::uint64_t lo, std::uint64_t hi) {
        const std::uint64_t span = hi - lo + 1;
        // rejection sampling for exact uniformity
        const std::uint64_t limit = UINT64_MAX - (UINT64_MAX % span);
        std::uint64_t v = engine_();
        while (v >= limit) v = engine_();
        return lo + (v % span);
    }

    bool bernoulli(double p) { return uniform() < p; }

    // Standard normal via Box-Muller, caching the second draw.
    double normal() {
        if (has_cached_) {
            has_cached_ = false;
            return cached_;
        }
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        cached_ = r * std::sin(a);
        has_cached_ = true;
        return r * std::cos(a);
    }

 private:
    std::uint64_t seed_mix() const {
        // engines seeded identically mix to the same value; fork() is a pure
        // function of (seed, purpose)
        std::mt19937_64 copy = engine_;
        return copy();
    }

    std::mt19937_64 engine_;
    bool has_cached_ = false;
    double cached_ = 0.0;
};

}  // namespace emodiff
