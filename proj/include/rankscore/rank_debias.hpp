#pragma once

#include "rankscore/common.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace rankscore {

/// Data of the debiasing program for one arm at one quantile level.
///   primal:  min_w sum_i w_i^2 / f_i^2   s.t.  || z - n^{-1/2} sum_i w_i x_i ||_inf <= gamma / n
///   dual:    min_v (1/4n) sum_i f_i^2 (x_i'v)^2 + z'v + (gamma/n) ||v||_1
/// Sums run over the rows of `group_design`; n is `n_total`, the size of the whole sample.
struct DebiasProblem {
    Eigen::Ref<const Matrix> group_design;
    Eigen::Ref<const Vector> densities;
    Eigen::Ref<const Vector> z;
    double gamma;
    /// Real-valued so that cross-validation folds can rescale it.
    double n_total;
};

struct DualSettings {
    double tolerance = 1e-9;
    int max_iterations = 20000;
    /// Initial penalty relative to trace(A)/p, A = (1/2n) sum f_i^2 x_i x_i'.
    double rho = 1.0;
    int balance_interval = 200;
    int check_interval = 5;
    /// Active-set crossover attempts (exact KKT solve on the current support).
    bool polish = true;
    int polish_interval = 20;
    /// Dual objective below -objective_floor is taken as unbounded descent.
    double objective_floor = 1e12;
    /// Problems with more columns than this use conjugate gradients for the v-update.
    Index direct_limit = 2000;
};

struct DualSolution {
    Vector v;
    double objective = 0.0;
    double gamma = 0.0;
    int iterations = 0;
    double primal_residual = 0.0;
    double dual_residual = 0.0;
    bool converged = false;
};

enum class WeightSource { dual_recovered, primal_direct };

/// Debiasing weights on the rows of the group design. `embed` scatters them into a
/// full-sample vector that is zero outside the group.
struct DebiasWeights {
    Vector w;
    WeightSource source = WeightSource::dual_recovered;

    Vector embed(std::span<const Index> group_rows, Index n_total) const;
};

/// Dual objective at v.
double dual_objective(const DebiasProblem& problem, const Eigen::Ref<const Vector>& v);

/// Primal objective sum_i w_i^2 / f_i^2.
double primal_objective(const DebiasProblem& problem, const Eigen::Ref<const Vector>& w);

/// || z - n^{-1/2} sum_i w_i x_i ||_inf.
double box_violation_norm(const DebiasProblem& problem, const Eigen::Ref<const Vector>& w);

/// ADMM on the dual with exact crossover. `warm_start` (length p) seeds the iterate.
/// Throws InfeasibleError on unbounded descent and ConvergenceError on budget exhaustion.
DualSolution solve_dual(const DebiasProblem& problem, const DualSettings& settings = {},
                        const Vector* warm_start = nullptr);

/// w_i = -f_i^2 x_i'v / (2 sqrt(n)).
DebiasWeights recover_weights(const DualSolution& dual, const DebiasProblem& problem);

struct PrimalSettings {
    double tolerance = 1e-10;
    int max_iterations = 200000;
};

/// Direct solve of the weighted least-norm program (ADMM on the box constraint, then an exact
/// active-set solve). Desk-scale reference only; throws InfeasibleError when no feasible w is found.
DebiasWeights solve_primal_oracle(const DebiasProblem& problem, const PrimalSettings& settings = {});

enum class GammaRule { one_se, two_se, min };

GammaRule parse_gamma_rule(const std::string& name);
std::string to_string(GammaRule rule);

/// 50 log-spaced values from n ||z||_inf down to that value / 1e4, ascending.
std::vector<double> default_gamma_grid(const Eigen::Ref<const Vector>& z, double n_total, int points = 50,
                                       double ratio = 1e-4);

struct GammaCv {
    std::vector<double> grid;
    /// Mean held-out risk per grid point; +inf where any fold failed.
    std::vector<double> mean_risk;
    std::vector<double> se_risk;
    std::vector<int> failed_folds;
    Index best_index = 0;
    Index selected_index = 0;
    double selected = 0.0;
};

/// K-fold cross-validation of the dual risk over `grid` (ascending). Rows are assigned to folds by
/// a seeded permutation. Each training problem uses n' = n_total * n_train / n_d and keeps gamma/n fixed.
/// Held-out risk: (1/4 n'_test) sum_test f_i^2 (x_i'v)^2 + z'v with n'_test = n_total * n_test / n_d.
/// Folds run on up to `threads` workers; results do not depend on the thread count.
GammaCv cross_validate_gamma(const Eigen::Ref<const Matrix>& group_design, const Eigen::Ref<const Vector>& densities,
                             const Eigen::Ref<const Vector>& z, double n_total, int folds,
                             std::span<const double> grid, GammaRule rule, std::uint64_t rng_seed,
                             const DualSettings& settings = {}, int threads = 1);

double select_gamma(const Eigen::Ref<const Matrix>& group_design, const Eigen::Ref<const Vector>& densities,
                    const Eigen::Ref<const Vector>& z, double n_total, int folds, std::span<const double> grid,
                    GammaRule rule, std::uint64_t rng_seed, const DualSettings& settings = {}, int threads = 1);

} // namespace rankscore
