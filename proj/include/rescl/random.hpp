#pragma once

#include <cstdint>
#include <vector>

namespace rescl {

/// SplitMix64 counter generator. Chosen because the update is pure 64-bit
/// integer arithmetic, so streams are reproducible across platforms and
/// languages; datasets and weight initializations both derive from it.
class SplitMix64 {
public:
    explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next() {
        std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    /// Uniform double in [0, 1), 53 mantissa bits.
    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Unbiased integer in [0, n) via rejection sampling.
    std::uint64_t below(std::uint64_t n) {
        std::uint64_t min = (~n + 1) % n;  // 2^64 mod n
        std::uint64_t x;
        do {
            x = next();
        } while (x < min);
        return x % n;
    }

    /// Approximate standard normal as a sum of 12 uniforms. Avoids
    /// transcendental functions so results do not depend on libm.
    double normal() {
        double s = 0.0;
        for (int i = 0; i < 12; ++i) s += uniform();
        return s - 6.0;
    }

    template <typename V>
    void shuffle(std::vector<V>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::uint64_t state_;
};

}  // namespace rescl
