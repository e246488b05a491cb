#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

namespace costa {

// All randomness in the project flows through this header so that runs are
// reproducible bit-for-bit from a single seed, across machines and across
// thread counts. The generator is xoshiro256** seeded via splitmix64; the
// variate recipes below (bounded integers, normal, gamma, beta) are pinned
// to exact draw sequences, so any reimplementation that follows them
// produces identical streams.

inline uint64_t splitmix64(uint64_t& state) {
    state += 0x9e3779b97f4a7c15ull;
    uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

inline uint64_t fnv1a64(std::string_view bytes) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

class Rng {
public:
    explicit Rng(uint64_t seed) {
        uint64_t s = seed;
        for (auto& w : state_) w = splitmix64(s);
    }

    // Independent sub-stream for a named purpose. Streams are keyed by
    // (seed, tag, a, b), e.g. ("spans", hash(doc_id), round) so per-document
    // work parallelizes without coordination.
    static Rng derive(uint64_t seed, std::string_view tag, uint64_t a = 0, uint64_t b = 0) {
        uint64_t x = seed ^ fnv1a64(tag);
        uint64_t m = x;
        x = splitmix64(m) ^ a;
        m = x;
        x = splitmix64(m) ^ b;
        return Rng(x);
    }

    uint64_t next_u64() {
        const uint64_t result = rotl(state_[1] * 5, 7) * 9;
        const uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    // Uniform on [0,1), 53-bit resolution.
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Unbiased uniform on {0, ..., n-1} via rejection.
    uint64_t below(uint64_t n) {
        const uint64_t threshold = (-n) % n;
        for (;;) {
            const uint64_t x = next_u64();
            if (x >= threshold) return x % n;
        }
    }

    // Standard normal; consumes exactly two uniforms (Box-Muller, cosine
    // branch only, no cached spare).
    double normal() {
        const double u1 = next_double();
        const double u2 = next_double();
        return std::sqrt(-2.0 * std::log1p(-u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    // Marsaglia-Tsang gamma. For alpha < 1 boosts via gamma(alpha+1)*U^(1/alpha).
    double gamma(double alpha) {
        if (alpha < 1.0) {
            const double boost = gamma(alpha + 1.0);
            return boost * std::pow(next_double(), 1.0 / alpha);
        }
        const double d = alpha - 1.0 / 3.0;
        const double c = 1.0 / std::sqrt(9.0 * d);
        for (;;) {
            double x, v;
            do {
                x = normal();
                v = 1.0 + c * x;
            } while (v <= 0.0);
            v = v * v * v;
            const double u = next_double();
            if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
            if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
        }
    }

    // Beta via two gamma draws: X/(X+Y), X~Gamma(a), Y~Gamma(b).
    double beta(double a, double b) {
        const double x = gamma(a);
        const double y = gamma(b);
        const double s = x + y;
        if (s <= 0.0) return 0.5;
        return x / s;
    }

    std::array<uint64_t, 4> state() const { return state_; }
    void set_state(const std::array<uint64_t, 4>& s) { state_ = s; }

private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    std::array<uint64_t, 4> state_{};
};

}  // namespace costa
