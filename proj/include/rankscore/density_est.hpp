#pragma once

#include "rankscore/qr_core.hpp"

#include <map>
#include <optional>
#include <vector>

namespace rankscore {

/// h = min(n^{-1/6}, tau(1-tau)/2). Keeps tau +- h inside (0,1).
double bandwidth(double tau, Index n);

/// Density estimates for one quantile level and one treatment arm.
struct DensitySlice {
    double tau = 0.5;
    double h = 0.0;
    Vector values;
    /// floored[i] marks entries whose quantile difference was nonpositive.
    std::vector<bool> floored;
    double floor = 0.0;
    Index floored_count = 0;
};

/// f_i = 2h / (x_i' theta_upper - x_i' theta_lower). Nonpositive denominators are floored at
/// 1e-4 times the median of the positive estimates and flagged. Throws InputError when every
/// denominator is nonpositive.
DensitySlice densities_from_coefficients(const Eigen::Ref<const Matrix>& design,
                                         const Eigen::Ref<const Vector>& theta_upper,
                                         const Eigen::Ref<const Vector>& theta_lower, double tau, double h);

struct DensitySettings {
    /// Fixed bandwidth; the default rule is used when unset.
    std::optional<double> bandwidth;
    /// Sample size entering the bandwidth rule; 0 means the group size.
    Index n_total = 0;
};

/// Penalized fits at tau +- h, refits on each support, then the difference quotient.
/// Fits are memoized in `fitter`, so neighbouring grid points share work.
DensitySlice estimate_densities(GroupFitter& fitter, double tau, const DensitySettings& settings = {});

/// Convenience overload that builds a one-off fitter.
DensitySlice estimate_densities(const Matrix& group_design, const Vector& group_response, double tau,
                                const GroupPenalty& penalty, const DensitySettings& settings = {},
                                const QrSettings& qr_settings = {});

/// Per-observation, per-quantile densities for one arm.
class DensityField {
public:
    void insert(DensitySlice slice);
    const DensitySlice& slice(double tau) const;
    double at(Index i, double tau) const { return slice(tau).values[i]; }
    bool contains(double tau) const { return slices_.count(tau) > 0; }
    std::vector<double> levels() const;
    Index floored_count() const;

private:
    std::map<double, DensitySlice> slices_;
};

} // namespace rankscore
