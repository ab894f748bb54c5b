#pragma once

#include "rankscore/dataset.hpp"
#include "rankscore/hqte_inference.hpp"
#include "rankscore/stats.hpp"

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace rankscore {

enum class Noise { homoscedastic, heteroscedastic };
enum class ThetaShape { sparse, pseudo_dense, dense };
enum class ZShape { sparse, dense };

struct SimDesign {
    Index n = 600;
    Index p = 100;
    Noise noise = Noise::homoscedastic;
    ThetaShape theta1_shape = ThetaShape::sparse;
    double theta1_norm = 1.0;
    ZShape z_shape = ZShape::sparse;

    /// Throws DomainError unless p >= 9, n >= 20 and theta1_norm > 0.
    void validate() const;
};

/// "homo-sparse", "hetero-pseudo-dense", ... (noise, then theta1 shape).
SimDesign parse_design(const std::string& name);
std::string design_name(const SimDesign& design);

/// Coefficients with the intercept first: theta0 = (0.5, 0, 1, -1, 0, ...).
Vector true_theta0(Index p);
/// theta1 of the requested shape scaled to the requested Euclidean norm.
Vector true_theta1(const SimDesign& design);
Vector design_z(const SimDesign& design);

/// Coefficients of the conditional tau-quantile of Y_d given X.
Vector true_quantile_coefficients(const SimDesign& design, int arm, double tau);
/// Support of the arm's quantile coefficients, always including the intercept.
Support true_support(const SimDesign& design, int arm);
/// alpha(tau; z) = z'(theta_1(tau) - theta_0(tau)) at the design's z.
double true_alpha(const SimDesign& design, double tau);

/// P(D = 1 | X) = logistic(1 - X_7 + X_8), with X_1 the intercept (0-based columns 6 and 7).
double propensity(const Eigen::Ref<const Vector>& x_row);

/// One draw of the simulation design. X has the intercept in column 0 and W ~ N(0, AR(0.5)) in the rest.
Dataset generate_dataset(const SimDesign& design, Rng& rng);

enum class Estimator { rank_1se, rank_2se, oracle, refit, lasso };
std::string to_string(Estimator estimator);
Estimator parse_estimator(const std::string& name);

struct ComparatorResult {
    double alpha_hat = 0.0;
    double ci_low = 0.0;
    double ci_high = 0.0;
    /// Variance of alpha_hat times n (sandwich, summed over arms).
    double sigma2 = 0.0;
};

struct ComparatorOptions {
    /// Lasso penalty settings (shared with the rank estimator through select_arm_penalty).
    EstimateOptions estimate{};
    /// True supports per arm; required for the oracle.
    std::array<Support, 2> oracle_support{};
};

/// Oracle (QR on the true support), refit (QR on the lasso support) or lasso (the pilot as is).
/// CIs use the sandwich tau(1-tau) z'J^{-1} S J^{-1} z / n_d per arm, J with plug-in densities
/// from tau +- h fits on the same support.
ComparatorResult comparator_fit(const Dataset& data, const Eigen::Ref<const Vector>& z, double tau,
                                Estimator which, const ComparatorOptions& options);

struct McOptions {
    std::vector<double> tau_list{0.5};
    int n_reps = 100;
    std::vector<Estimator> estimators{Estimator::rank_1se, Estimator::oracle, Estimator::refit, Estimator::lasso};
    int threads = 1;
    std::uint64_t seed = 1;
    /// Replications draw from substream 0 only (a determinism check; all replications coincide).
    bool common_substream = false;
    /// Base options for the rank estimators; the band and integral are switched off.
    EstimateOptions estimate{};
};

struct McRow {
    Estimator estimator = Estimator::rank_1se;
    double tau = 0.5;
    double truth = 0.0;
    int replications = 0;
    double sqrt_n_bias = 0.0;
    double sqrt_n_bias_se = 0.0;
    double n_variance = 0.0;
    double n_variance_se = 0.0;
    double coverage = 0.0;
    double coverage_se = 0.0;
    double mean_ci_length = 0.0;
    /// Mean and variance of sqrt(n)(alpha_hat - alpha) / sigma_hat.
    double standardized_mean = 0.0;
    double standardized_variance = 0.0;
};

struct McRecord {
    bool ok = false;
    std::string error;
    /// [estimator][tau]
    std::vector<std::vector<ComparatorResult>> results;
};

struct McMetrics {
    SimDesign design;
    std::vector<McRow> rows;
    int attempted = 0;
    int failures = 0;
    std::vector<McRecord> records;
};

/// Replication r uses Rng::substream(seed, r). Failed replications are excluded and counted;
/// more than 10% failures throws Error. Results do not depend on the thread count.
McMetrics run_monte_carlo(const SimDesign& design, const McOptions& options);

} // namespace rankscore
