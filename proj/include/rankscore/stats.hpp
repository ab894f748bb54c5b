#pragma once

#include "rankscore/common.hpp"

#include <cstdint>
#include <random>
#include <span>
#include <vector>

namespace rankscore {

/// Standard normal quantile function.
double normal_quantile(double p);

/// Standard normal cumulative distribution function.
double normal_cdf(double x);

/// Standard normal density.
double normal_pdf(double x);

/// Linear-interpolation sample quantile (Hyndman-Fan type 7, R's default).
/// The input is copied and partially sorted.
double empirical_quantile(std::span<const double> values, double level);

double median(std::span<const double> values);
double mean(std::span<const double> values);
/// Unbiased sample variance; zero for fewer than two values.
double sample_variance(std::span<const double> values);

/// Seeded 64-bit Mersenne twister with explicit, platform-stable uniform draws.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    /// Independent substream keyed by (seed, stream).
    static Rng substream(std::uint64_t seed, std::uint64_t stream);

    /// Uniform on [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
    double normal() { return normal_(engine_); }
    std::uint64_t next() { return engine_(); }
    std::mt19937_64& engine() { return engine_; }

private:
    std::mt19937_64 engine_;
    std::normal_distribution<double> normal_{0.0, 1.0};
};

/// Seed of substream `stream`, for components that take a plain seed.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
    return Rng::substream(seed, stream).next();
}

} // namespace rankscore
