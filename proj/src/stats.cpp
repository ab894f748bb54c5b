#include "rankscore/stats.hpp"

#include <boost/math/distributions/normal.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace rankscore {

namespace {
const boost::math::normal_distribution<double> kStandardNormal{0.0, 1.0};
}

double normal_quantile(double p) {
    if (!(p > 0.0 && p < 1.0)) {
        throw DomainError("normal quantile requires p in (0,1)");
    }
    return boost::math::quantile(kStandardNormal, p);
}

double normal_cdf(double x) { return boost::math::cdf(kStandardNormal, x); }

double normal_pdf(double x) { return boost::math::pdf(kStandardNormal, x); }

double empirical_quantile(std::span<const double> values, double level) {
    if (values.empty()) {
        throw InputError("empirical quantile of an empty sample");
    }
    if (!(level >= 0.0 && level <= 1.0)) {
        throw DomainError("quantile level must lie in [0,1]");
    }
    std::vector<double> sorted(values.begin(), values.end());
    const double h = (static_cast<double>(sorted.size()) - 1.0) * level;
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const auto hi = std::min(lo + 1, sorted.size() - 1);
    std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(lo), sorted.end());
    const double lo_value = sorted[lo];
    double hi_value = lo_value;
    if (hi != lo) {
        hi_value = *std::min_element(sorted.begin() + static_cast<std::ptrdiff_t>(lo) + 1, sorted.end());
    }
    return lo_value + (h - static_cast<double>(lo)) * (hi_value - lo_value);
}

double median(std::span<const double> values) { return empirical_quantile(values, 0.5); }

double mean(std::span<const double> values) {
    if (values.empty()) {
        return 0.0;
    }
    return std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
}

double sample_variance(std::span<const double> values) {
    if (values.size() < 2) {
        return 0.0;
    }
    const double m = mean(values);
    double ss = 0.0;
    for (double v : values) {
        ss += (v - m) * (v - m);
    }
    return ss / static_cast<double>(values.size() - 1);
}

Rng Rng::substream(std::uint64_t seed, std::uint64_t stream) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32),
                      0x5eedu};
    std::mt19937_64 tmp(seq);
    return Rng(tmp());
}

} // namespace rankscore
