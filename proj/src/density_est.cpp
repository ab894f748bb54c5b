#include "rankscore/density_est.hpp"

#include "rankscore/stats.hpp"

#include <cmath>
#include <string>

namespace rankscore {

double bandwidth(double tau, Index n) {
    require_tau(tau);
    if (n < 2) {
        throw DomainError("bandwidth rule needs n >= 2");
    }
    return std::min(std::pow(static_cast<double>(n), -1.0 / 6.0), tau * (1.0 - tau) / 2.0);
}

DensitySlice densities_from_coefficients(const Eigen::Ref<const Matrix>& design,
                                         const Eigen::Ref<const Vector>& theta_upper,
                                         const Eigen::Ref<const Vector>& theta_lower, double tau, double h) {
    if (theta_upper.size() != design.cols() || theta_lower.size() != design.cols()) {
        throw InputError("coefficient length does not match design columns");
    }
    if (!(h > 0.0)) {
        throw DomainError("bandwidth must be positive");
    }
    const Vector spread = design * (theta_upper - theta_lower);
    const Index n = spread.size();

    DensitySlice slice;
    slice.tau = tau;
    slice.h = h;
    slice.values.resize(n);
    slice.floored.assign(static_cast<std::size_t>(n), false);
    std::vector<double> positive;
    positive.reserve(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) {
        if (spread[i] > 0.0) {
            slice.values[i] = 2.0 * h / spread[i];
            positive.push_back(slice.values[i]);
        }
    }
    if (positive.empty()) {
        throw InputError("density estimation failed at tau=" + std::to_string(tau) +
                         ": every fitted quantile difference is nonpositive");
    }
    slice.floor = 1e-4 * median(positive);
    for (Index i = 0; i < n; ++i) {
        if (!(spread[i] > 0.0)) {
            slice.values[i] = slice.floor;
            slice.floored[static_cast<std::size_t>(i)] = true;
            ++slice.floored_count;
        }
    }
    return slice;
}

DensitySlice estimate_densities(GroupFitter& fitter, double tau, const DensitySettings& settings) {
    require_tau(tau);
    const Index n = settings.n_total > 0 ? settings.n_total : fitter.design().rows();
    const double h = settings.bandwidth ? *settings.bandwidth : bandwidth(tau, n);
    if (!(h > 0.0) || !(tau - h > 0.0) || !(tau + h < 1.0)) {
        throw DomainError("bandwidth " + std::to_string(h) + " puts tau +- h outside (0,1) at tau=" +
                          std::to_string(tau));
    }
    const QrFit& upper = fitter.refit(tau + h);
    const QrFit& lower = fitter.refit(tau - h);
    return densities_from_coefficients(fitter.design(), upper.theta, lower.theta, tau, h);
}

DensitySlice estimate_densities(const Matrix& group_design, const Vector& group_response, double tau,
                                const GroupPenalty& penalty, const DensitySettings& settings,
                                const QrSettings& qr_settings) {
    GroupFitter fitter(group_design, group_response, penalty, qr_settings);
    return estimate_densities(fitter, tau, settings);
}

void DensityField::insert(DensitySlice slice) {
    const double tau = slice.tau;
    slices_.insert_or_assign(tau, std::move(slice));
}

const DensitySlice& DensityField::slice(double tau) const {
    auto it = slices_.find(tau);
    if (it == slices_.end()) {
        throw InputError("no density slice at tau=" + std::to_string(tau));
    }
    return it->second;
}

std::vector<double> DensityField::levels() const {
    std::vector<double> out;
    out.reserve(slices_.size());
    for (const auto& [tau, slice] : slices_) {
        out.push_back(tau);
    }
    return out;
}

Index DensityField::floored_count() const {
    Index count = 0;
    for (const auto& [tau, slice] : slices_) {
        count += slice.floored_count;
    }
    return count;
}

} // namespace rankscore
