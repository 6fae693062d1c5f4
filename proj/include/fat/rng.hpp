#pragma once

#include <cmath>
#include <cstdint>

namespace fat {

/// splitmix64: the 64-bit generator used for all random initialization.
/// Constants are the canonical ones from Steele/Lea/Flood's SplittableRandom.
/// Pinned here (rather than std::mt19937 + distributions) so that streams are
/// bit-identical across platforms and standard libraries.
class SplitMix64 {
public:
    explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next() {
        std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    /// Uniform in [0, 1), 53 mantissa bits.
    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    /// Standard normal via Box-Muller (polar form avoided: trig form is
    /// branch-free and reproducible).
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    /// Normal(0, std) truncated to +-2 std by rejection.
    double truncated_normal(double std_dev) {
        double v = normal();
        while (v < -2.0 || v > 2.0) v = normal();
        return v * std_dev;
    }

private:
    std::uint64_t state_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace fat
