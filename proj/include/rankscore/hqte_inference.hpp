#pragma once

#include "rankscore/dataset.hpp"
#include "rankscore/density_est.hpp"
#include "rankscore/qr_core.hpp"
#include "rankscore/rank_debias.hpp"

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace rankscore {

/// Debiased conditional quantile estimate for one arm at one quantile level.
struct CqfEstimate {
    double tau = 0.5;
    int group = 0;
    Vector z;
    double q_hat = 0.0;
    /// The same estimate in dual form, -(1/2n) sum f_i (tau - 1{..}) x_i'v replacing the weight sum.
    double q_hat_dual = 0.0;
    Vector theta_pilot;
    DebiasWeights weights;
    DualSolution dual;
};

/// Q = z'theta + n^{-1/2} sum_i w_i f_i^{-1} (tau - 1{y_i <= x_i'theta}), summed over the arm's rows.
CqfEstimate debiased_cqf(const Eigen::Ref<const Vector>& z, const QrFit& pilot, const DebiasWeights& weights,
                         const DualSolution& dual, const Eigen::Ref<const Vector>& densities,
                         const Eigen::Ref<const Vector>& responses, const Eigen::Ref<const Matrix>& group_design,
                         double tau, double n_total, int group = 0);

/// alpha = Q_1 - Q_0. Throws DomainError when tau or z differ.
double hqte(const CqfEstimate& cqf1, const CqfEstimate& cqf0);

/// tau(1-tau) sum_i w_i^2 / f_i^2.
double variance_primal(const DebiasWeights& weights, const Eigen::Ref<const Vector>& densities, double tau);

/// tau(1-tau) (1/4n) sum_i f_i^2 (x_i'v)^2.
double variance_dual(const DualSolution& dual, const Eigen::Ref<const Vector>& densities,
                     const Eigen::Ref<const Matrix>& group_design, double tau, double n_total);

/// H(tau_j, tau_k) = (min(tau_j,tau_k) - tau_j tau_k) v_j' ((1/4n) sum_i f_i(tau_j) f_i(tau_k) x_i x_i') v_k.
Matrix covariance_matrix(std::span<const DualSolution> duals, const DensityField& densities,
                         const Eigen::Ref<const Matrix>& group_design, std::span<const double> tau_grid,
                         double n_total);

/// alpha +- z_level sqrt(sigma2 / n).
std::pair<double, double> pointwise_ci(double alpha_hat, double sigma2_total, double n_total, double level = 0.95);

/// Multivariate normal draws with covariance equal to the correlation matrix of H1 + H0.
/// Grid points with zero variance are left out of the supremum.
struct GaussianProcessDraws {
    /// n_draws x m standardized draws.
    Matrix draws;
    Vector sd;
    double jitter = 0.0;
};

GaussianProcessDraws simulate_limit_process(const Eigen::Ref<const Matrix>& h1, const Eigen::Ref<const Matrix>& h0,
                                            std::span<const double> sigma2, int n_draws, std::uint64_t rng_seed);

struct UniformBand {
    double kappa = 0.0;
    Vector low;
    Vector high;
    double jitter = 0.0;
};

/// kappa = level-quantile of max_j |G_j| over the standardized draws; band alpha +- kappa sigma / sqrt(n).
UniformBand uniform_band(const Eigen::Ref<const Matrix>& h1, const Eigen::Ref<const Matrix>& h0,
                         std::span<const double> sigma2, std::span<const double> alpha_hat, double n_total,
                         double level, int n_draws, std::uint64_t rng_seed);

struct IntegratedHqte {
    double estimate = 0.0;
    double low = 0.0;
    double high = 0.0;
    /// Level-quantile of |sum_j omega_j G_j| (unstandardized), the half-width times sqrt(n).
    double critical = 0.0;
};

/// Trapezoid rule over the grid; the CI uses the trapezoid-weighted sum of the same draws as uniform_band.
IntegratedHqte integrated_hqte(std::span<const double> alpha_hat, const Eigen::Ref<const Matrix>& h1,
                               const Eigen::Ref<const Matrix>& h0, std::span<const double> tau_grid, double n_total,
                               double level, int n_draws, std::uint64_t rng_seed);

/// 17 equispaced levels on [0.1, 0.9].
std::vector<double> default_tau_grid();

struct EstimateOptions {
    /// Weighted (loadings) lasso penalty; false uses lambda * ||theta||_1.
    bool weighted_penalty = true;
    /// Per-arm overrides, indexed by arm.
    std::array<std::optional<double>, 2> lambda{};
    std::array<std::optional<double>, 2> gamma{};
    int lambda_sims = 1000;
    double lambda_level = 0.9;
    double lambda_multiplier = 1.5;
    /// Empty means the default grid for each problem.
    std::vector<double> gamma_grid{};
    int cv_folds = 10;
    GammaRule gamma_rule = GammaRule::one_se;
    std::optional<double> bandwidth{};
    double level = 0.95;
    bool band = true;
    bool integrate = true;
    int band_draws = 10000;
    std::uint64_t seed = 1;
    int threads = 1;
    QrSettings qr{};
    DualSettings dual{};
};

struct ArmDiagnostics {
    Index n_rows = 0;
    double lambda = 0.0;
    std::vector<double> gamma;
    std::vector<Index> pilot_support_size;
    std::vector<int> pilot_iterations;
    std::vector<int> dual_iterations;
    std::vector<Index> floored_densities;
    std::vector<double> bandwidth;
    std::vector<double> q_hat;
    std::vector<double> sigma2;
};

struct HqteResult {
    std::vector<double> tau_grid;
    Vector z;
    double n_total = 0.0;
    double level = 0.95;
    std::vector<double> alpha_hat;
    /// tau(1-tau)(sum w^2/f^2 over both arms), the CI variance.
    std::vector<double> sigma2;
    /// The same variance from the dual form.
    std::vector<double> sigma2_dual;
    std::vector<double> ci_low;
    std::vector<double> ci_high;
    Matrix h1;
    Matrix h0;
    std::optional<UniformBand> band;
    std::optional<IntegratedHqte> integrated;
    std::array<ArmDiagnostics, 2> arms;
    /// Per-arm CQF estimates, indexed [arm][tau].
    std::array<std::vector<CqfEstimate>, 2> cqf;
};

/// The arm's lasso penalty under `options`: override or simulated lambda, with loadings when weighted.
/// Deterministic in (options.seed, arm).
GroupPenalty select_arm_penalty(const Eigen::Ref<const Matrix>& arm_design, std::span<const double> tau_grid,
                                const EstimateOptions& options, int arm);

/// Full pipeline per arm (lambda, pilot fits, densities, gamma, dual, weights, CQF), then HQTE,
/// variances, covariance matrices, CIs, band and integral.
HqteResult estimate_full(const Dataset& data, const Eigen::Ref<const Vector>& z, std::span<const double> tau_grid,
                         const EstimateOptions& options = {});

} // namespace rankscore
