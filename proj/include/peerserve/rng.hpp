#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "peerserve/bytes.hpp"

namespace peerserve {

/**
 * Deterministic RNG with hand-rolled samplers. std::mt19937_64 output is
 * standardized but the std distributions are not, so every draw here goes
 * through our own transforms to keep runs reproducible across toolchains.
 */
class Rng {
public:
    explicit Rng(uint64_t seed = 0x5EED) : engine_(seed) {}

    uint64_t next_u64() { return engine_(); }

    /** Uniform integer in [0, n). */
    uint64_t uniform(uint64_t n) {
        // modulo with rejection to stay unbiased
        const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t v;
        do {
            v = engine_();
        } while (v >= limit);
        return v % n;
    }

    /** Uniform double in [0, 1). */
    double real() { return (engine_() >> 11) * 0x1.0p-53; }

    /** Uniform double in (0, 1]. */
    double real_open() { return ((engine_() >> 11) + 1) * 0x1.0p-53; }

    bool chance(double p) { return real() < p; }

    /** Exponential with the given mean. */
    double exponential(double mean) { return -mean * std::log(real_open()); }

    double normal() {
        // Box-Muller; one value per call keeps draw counts predictable
        double u1 = real_open();
        double u2 = real();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    /** Lognormal parameterized by its median and log-space sigma. */
    double lognormal(double median, double sigma) {
        return median * std::exp(sigma * normal());
    }

    uint8_t byte() { return uint8_t(uniform(256)); }

    Bytes bytes(size_t n) {
        Bytes out(n);
        for (auto& b : out) b = byte();
        return out;
    }

    /** Independent child stream; stable under unrelated draw-count changes. */
    Rng fork(uint64_t tag) { return Rng(engine_() ^ (0x9E3779B97F4A7C15ull * (tag + 1))); }

private:
    std::mt19937_64 engine_;
};

}  // namespace peerserve
