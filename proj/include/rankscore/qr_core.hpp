#pragma once

#include "rankscore/common.hpp"

#include <cstdint>
#include <map>
#include <mutex>
#include <span>

namespace rankscore {

/// Check loss rho_tau(u) = u (tau - 1{u <= 0}).
double check_loss(double u, double tau);

/// argmin_z { rho_tau(z) + (z - x)^2 / (2 sigma) }.
double check_loss_prox(double x, double tau, double sigma);

inline double soft_threshold(double x, double threshold) {
    if (x > threshold) return x - threshold;
    if (x < -threshold) return x + threshold;
    return 0.0;
}

/// Penalized quantile regression instance:
///   min_theta  sum_i rho_tau(y_i - x_i' theta) + lambda * sum_k w_k |theta_k|.
/// An empty `penalty_weights` means all ones.
struct QrProblem {
    Eigen::Ref<const Matrix> design;
    Eigen::Ref<const Vector> response;
    double tau;
    double lambda = 0.0;
    Vector penalty_weights{};
};

struct QrSettings {
    double tolerance = 1e-6;
    int max_iterations = 20000;
    /// Initial ADMM penalty, in units of the inverse response scale.
    double rho = 1.0;
    /// Over-relaxation factor in (0, 2); 1 is plain ADMM.
    double relaxation = 1.6;
    bool adaptive_rho = true;
    double rho_factor = 2.0;
    double balance_ratio = 10.0;
    /// Iterations between residual-balancing checks.
    int balance_interval = 500;
    /// Residuals are evaluated (and rho rebalanced) every `check_interval` iterations.
    int check_interval = 10;
    /// Attempt an exact active-set crossover every `polish_interval` iterations; a certified
    /// KKT point terminates the solve.
    bool polish = true;
    int polish_interval = 50;
    /// Return an unconverged fit instead of throwing ConvergenceError.
    bool allow_unconverged = false;
};

struct QrFit {
    Vector theta;
    Support support;
    double tau = 0.5;
    double lambda = 0.0;
    double objective = 0.0;
    int iterations = 0;
    double primal_residual = 0.0;
    double dual_residual = 0.0;
    bool converged = false;
    /// Element of the check-loss subdifferential at the final residuals (KKT certificate).
    Vector subgradient;
};

/// Objective of a QrProblem at theta.
double qr_objective(const QrProblem& problem, const Eigen::Ref<const Vector>& theta);

/// Coordinates with |theta_k| > 1e-6 * max(1, ||theta||_inf).
Support support_of(const Eigen::Ref<const Vector>& theta);

/// ADMM solver for the (weighted) l1-penalized quantile regression program.
QrFit solve_penalized_qr(const QrProblem& problem, const QrSettings& settings = {});

/// Unpenalized quantile regression restricted to `support`; off-support coefficients are zero.
/// An empty support falls back to the intercept-only fit when column 0 is all ones.
QrFit refit_qr(const Eigen::Ref<const Matrix>& design, const Eigen::Ref<const Vector>& response, double tau,
               const Support& support, const QrSettings& settings = {});

/// Column loadings sigma_k = sqrt(n^-1 sum_i x_ik^2). Throws on an all-zero column.
Vector column_loadings(const Eigen::Ref<const Matrix>& design);

/// Simulated penalty level: multiplier times the `level`-quantile of
///   sup_{tau in grid} max_k |sum_i (tau - 1{U_i <= tau}) x_ik| / (sigma_k sqrt(tau(1-tau))),
/// U_i iid Uniform(0,1), over `n_sim` replicates.
double select_lambda(const Eigen::Ref<const Matrix>& design_group, std::span<const double> tau_grid, int n_sim,
                     double level, double multiplier, std::uint64_t rng_seed);

/// Penalty shared by every quantile level fit within one treatment arm.
/// Weighted form: lambda * sqrt(tau(1-tau)) * sum_k loading_k |theta_k|.
/// Unweighted form: lambda * ||theta||_1.
struct GroupPenalty {
    double lambda = 0.0;
    Vector loadings{};
    bool weighted = true;

    double level_lambda(double tau) const;
};

/// Memoized penalized and refit quantile regressions for one treatment arm, keyed by quantile level.
/// Holds its own copy of the data. Thread-safe; returned references stay valid for the lifetime of the fitter.
class GroupFitter {
public:
    GroupFitter(const Matrix& design, const Vector& response, GroupPenalty penalty, QrSettings settings = {});

    const QrFit& penalized(double tau);
    const QrFit& refit(double tau);

    const Matrix& design() const { return design_; }
    const Vector& response() const { return response_; }
    const GroupPenalty& penalty() const { return penalty_; }

private:
    Matrix design_;
    Vector response_;
    GroupPenalty penalty_;
    QrSettings settings_;
    std::mutex mutex_;
    std::map<double, QrFit> penalized_;
    std::map<double, QrFit> refit_;
};

} // namespace rankscore
