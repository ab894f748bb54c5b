#include "rankscore/rank_debias.hpp"

#include "rankscore/parallel.hpp"
#include "rankscore/qr_core.hpp"
#include "rankscore/stats.hpp"

#include <Eigen/IterativeLinearSolvers>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>

namespace rankscore {

namespace {

void validate(const DebiasProblem& problem) {
    const Index n_d = problem.group_design.rows();
    const Index p = problem.group_design.cols();
    if (n_d == 0 || p == 0) {
        throw InputError("empty debiasing problem");
    }
    if (problem.densities.size() != n_d) {
        throw InputError("density vector length does not match group rows");
    }
    if (problem.z.size() != p) {
        throw InputError("z length (" + std::to_string(problem.z.size()) + ") does not match design columns (" +
                         std::to_string(p) + ")");
    }
    if (!(problem.densities.array() > 0.0).all() || !problem.densities.allFinite()) {
        throw DomainError("densities must be finite and strictly positive");
    }
    if (!(problem.gamma > 0.0) || !std::isfinite(problem.gamma)) {
        throw DomainError("gamma must be finite and positive");
    }
    if (!(problem.n_total >= static_cast<double>(n_d))) {
        throw DomainError("n_total must be at least the group size");
    }
    if (!problem.group_design.allFinite() || !problem.z.allFinite()) {
        throw InputError("non-finite values in debiasing problem");
    }
}

// A = (1/2n) sum_i f_i^2 x_i x_i'.
Matrix quadratic_form(const Eigen::Ref<const Matrix>& x, const Eigen::Ref<const Vector>& f, double n) {
    const Matrix scaled = f.asDiagonal() * x;
    Matrix a = Matrix::Zero(x.cols(), x.cols());
    a.selfadjointView<Eigen::Lower>().rankUpdate(scaled.transpose(), 1.0 / (2.0 * n));
    return a.selfadjointView<Eigen::Lower>();
}

// min_v 0.5 v'Av + z'v + c ||v||_1 with A fixed; reused along a gamma path.
class DualPath {
public:
    DualPath(Matrix a, Vector z, DualSettings settings)
        : a_(std::move(a)), z_(std::move(z)), settings_(settings) {
        const double trace = a_.trace();
        scale_ = trace > 0.0 ? trace / static_cast<double>(a_.rows()) : 1.0;
    }

    double objective(const Vector& v, double c) const {
        return 0.5 * v.dot(a_ * v) + z_.dot(v) + c * v.lpNorm<1>();
    }

    DualSolution solve(double c, double gamma, const Vector* warm) {
        const Index p = a_.rows();
        DualSolution out;
        out.gamma = gamma;
        if (z_.lpNorm<Eigen::Infinity>() <= c) {
            out.v = Vector::Zero(p);
            out.converged = true;
            return out;
        }
        double rho = settings_.rho * scale_;
        factorize(rho);

        Vector u = warm ? *warm : Vector::Zero(p);
        Vector v = u;
        // Scaled multiplier consistent with the warm start's subgradient.
        Vector eta = (-(a_ * u + z_) / rho).cwiseMax(-c / rho).cwiseMin(c / rho);
        Vector u_prev = u;
        Vector v_prev = v;
        double primal = std::numeric_limits<double>::infinity();
        double dual = primal;
        int iter = 0;
        for (iter = 1; iter <= settings_.max_iterations; ++iter) {
            u_prev = u;
            v_prev = v;
            v = linear_solve(rho * (u - eta) - z_, v);
            const Vector shifted = v + eta;
            for (Index k = 0; k < p; ++k) {
                u[k] = soft_threshold(shifted[k], c / rho);
            }
            eta += v - u;

            if (settings_.polish && iter % settings_.polish_interval == 0) {
                if (auto exact = polish(u, c)) {
                    return finish(std::move(*exact), c, iter, 0.0, 0.0, out);
                }
            }
            if (iter % settings_.check_interval != 0) {
                continue;
            }
            primal = (v - u).norm();
            dual = rho * (u - u_prev).norm();
            const double eps_primal = settings_.tolerance * (1.0 + std::max(v.norm(), u.norm()));
            const double eps_dual = settings_.tolerance * (1.0 + rho * eta.norm());
            if (primal <= eps_primal && dual <= eps_dual) {
                if (settings_.polish) {
                    if (auto exact = polish(u, c)) {
                        return finish(std::move(*exact), c, iter, 0.0, 0.0, out);
                    }
                }
                return finish(u, c, iter, primal, dual, out);
            }
            check_unbounded(u, v - v_prev, c);
            if (iter % settings_.balance_interval == 0) {
                const double factor = 2.0;
                if (primal > 10.0 * dual) {
                    rho *= factor;
                    eta /= factor;
                    factorize(rho);
                } else if (dual > 10.0 * primal) {
                    rho /= factor;
                    eta *= factor;
                    factorize(rho);
                }
            }
        }
        throw ConvergenceError("debiasing dual did not converge", settings_.max_iterations, primal, dual);
    }

private:
    void factorize(double rho) {
        Matrix m = a_;
        m.diagonal().array() += rho;
        if (a_.rows() > settings_.direct_limit) {
            shifted_ = std::move(m);
            cg_.compute(shifted_);
        } else {
            llt_.compute(m);
        }
    }

    Vector linear_solve(const Vector& b, const Vector& guess) {
        if (a_.rows() > settings_.direct_limit) {
            cg_.setTolerance(1e-12);
            return cg_.solveWithGuess(b, guess);
        }
        return llt_.solve(b);
    }

    // Exact solve of the KKT system on the support and signs of `iterate`.
    std::optional<Vector> polish(const Vector& iterate, double c) const {
        std::vector<Index> support;
        for (Index k = 0; k < iterate.size(); ++k) {
            if (iterate[k] != 0.0) support.push_back(k);
        }
        if (support.empty()) {
            return std::nullopt;
        }
        const auto q = static_cast<Index>(support.size());
        Matrix a_ss(q, q);
        Vector rhs(q);
        for (Index j = 0; j < q; ++j) {
            for (Index l = 0; l < q; ++l) {
                a_ss(j, l) = a_(support[j], support[l]);
            }
            rhs[j] = -z_[support[j]] - c * (iterate[support[j]] > 0.0 ? 1.0 : -1.0);
        }
        Eigen::LDLT<Matrix> ldlt(a_ss);
        if (ldlt.info() != Eigen::Success) {
            return std::nullopt;
        }
        const Vector v_s = ldlt.solve(rhs);
        Vector v = Vector::Zero(iterate.size());
        for (Index j = 0; j < q; ++j) {
            const double sign = iterate[support[j]] > 0.0 ? 1.0 : -1.0;
            if (!(v_s[j] * sign > 0.0)) {
                return std::nullopt;
            }
            v[support[j]] = v_s[j];
        }
        const Vector gradient = a_ * v + z_;
        const double slack = 1e-11 * (1.0 + c + z_.lpNorm<Eigen::Infinity>() + (a_ * v).lpNorm<Eigen::Infinity>());
        for (Index k = 0; k < v.size(); ++k) {
            if (v[k] != 0.0) {
                if (std::abs(gradient[k] + c * (v[k] > 0.0 ? 1.0 : -1.0)) > slack) return std::nullopt;
            } else if (std::abs(gradient[k]) > c + slack) {
                return std::nullopt;
            }
        }
        return v;
    }

    // A recession direction d with Ad ~ 0 and z'd + c||d||_1 < 0 certifies unbounded descent.
    void check_unbounded(const Vector& u, const Vector& step, double c) const {
        if (objective(u, c) < -settings_.objective_floor) {
            throw InfeasibleError("debiasing dual is unbounded below (gamma too small for this design)");
        }
        const double norm = step.norm();
        if (!(norm > 0.0) || u.norm() < 1e6 * (1.0 + z_.norm() / scale_)) {
            return;
        }
        const Vector d = step / norm;
        const double curvature = d.dot(a_ * d);
        const double slope = z_.dot(d) + c * d.lpNorm<1>();
        if (curvature <= 1e-12 * scale_ && slope < 0.0) {
            throw InfeasibleError("debiasing dual is unbounded below (gamma too small for this design)");
        }
    }

    DualSolution finish(Vector v, double c, int iter, double primal, double dual, DualSolution& out) const {
        out.objective = objective(v, c);
        out.v = std::move(v);
        out.iterations = iter;
        out.primal_residual = primal;
        out.dual_residual = dual;
        out.converged = true;
        return out;
    }

    Matrix a_;
    Vector z_;
    DualSettings settings_;
    double scale_ = 1.0;
    Eigen::LLT<Matrix> llt_;
    Matrix shifted_;
    Eigen::ConjugateGradient<Matrix, Eigen::Lower | Eigen::Upper> cg_;
};

} // namespace

Vector DebiasWeights::embed(std::span<const Index> group_rows, Index n_total) const {
    if (static_cast<Index>(group_rows.size()) != w.size()) {
        throw InputError("group row count does not match weight length");
    }
    Vector full = Vector::Zero(n_total);
    for (std::size_t j = 0; j < group_rows.size(); ++j) {
        const Index i = group_rows[j];
        if (i < 0 || i >= n_total) {
            throw InputError("group row index outside the sample");
        }
        full[i] = w[static_cast<Index>(j)];
    }
    return full;
}

double dual_objective(const DebiasProblem& problem, const Eigen::Ref<const Vector>& v) {
    const Vector fitted = problem.densities.cwiseProduct(problem.group_design * v);
    return fitted.squaredNorm() / (4.0 * problem.n_total) + problem.z.dot(v) +
           problem.gamma / problem.n_total * v.lpNorm<1>();
}

double primal_objective(const DebiasProblem& problem, const Eigen::Ref<const Vector>& w) {
    return w.cwiseQuotient(problem.densities).squaredNorm();
}

double box_violation_norm(const DebiasProblem& problem, const Eigen::Ref<const Vector>& w) {
    return (problem.z - problem.group_design.transpose() * w / std::sqrt(problem.n_total)).lpNorm<Eigen::Infinity>();
}

DualSolution solve_dual(const DebiasProblem& problem, const DualSettings& settings, const Vector* warm_start) {
    validate(problem);
    if (warm_start && warm_start->size() != problem.z.size()) {
        throw InputError("warm start length does not match design columns");
    }
    DualPath path(quadratic_form(problem.group_design, problem.densities, problem.n_total), problem.z, settings);
    return path.solve(problem.gamma / problem.n_total, problem.gamma, warm_start);
}

DebiasWeights recover_weights(const DualSolution& dual, const DebiasProblem& problem) {
    if (dual.v.size() != problem.group_design.cols()) {
        throw InputError("dual vector length does not match design columns");
    }
    DebiasWeights out;
    out.source = WeightSource::dual_recovered;
    out.w = -(problem.densities.array().square() * (problem.group_design * dual.v).array()).matrix() /
            (2.0 * std::sqrt(problem.n_total));
    return out;
}

namespace {

// Equality-constrained least-norm solve on the active box faces, certified against the full KKT system.
std::optional<Vector> primal_active_set(const Matrix& b, const Vector& f2, const Vector& lower, const Vector& upper,
                                        const Vector& bw, const Vector& multiplier, double tolerance) {
    const Index p = b.rows();
    std::vector<Index> active;
    std::vector<double> target;
    std::vector<int> side;
    const double width = (upper - lower).minCoeff();
    for (Index k = 0; k < p; ++k) {
        const double near = 1e3 * tolerance * (1.0 + std::abs(upper[k]) + std::abs(lower[k])) + 1e-3 * width;
        if (multiplier[k] > 0.0 && upper[k] - bw[k] <= near) {
            active.push_back(k);
            target.push_back(upper[k]);
            side.push_back(1);
        } else if (multiplier[k] < 0.0 && bw[k] - lower[k] <= near) {
            active.push_back(k);
            target.push_back(lower[k]);
            side.push_back(-1);
        }
    }
    if (active.empty()) {
        return std::nullopt;
    }
    const auto q = static_cast<Index>(active.size());
    Matrix bk(q, b.cols());
    Vector rhs(q);
    for (Index j = 0; j < q; ++j) {
        bk.row(j) = b.row(active[j]);
        rhs[j] = target[static_cast<std::size_t>(j)];
    }
    // w = F^2 B_K' mu / 2 with (B_K F^2 B_K' / 2) mu = b_K.
    const Matrix gram = bk * f2.asDiagonal() * bk.transpose() / 2.0;
    Eigen::LDLT<Matrix> ldlt(gram);
    if (ldlt.info() != Eigen::Success) {
        return std::nullopt;
    }
    const Vector mu = ldlt.solve(rhs);
    if ((gram * mu - rhs).lpNorm<Eigen::Infinity>() > 1e-10 * (1.0 + rhs.lpNorm<Eigen::Infinity>())) {
        return std::nullopt;
    }
    for (Index j = 0; j < q; ++j) {
        // Upper faces need mu <= 0 and lower faces mu >= 0 for stationarity with nonnegative multipliers.
        if (mu[j] * side[static_cast<std::size_t>(j)] > 1e-12 * (1.0 + mu.lpNorm<Eigen::Infinity>())) {
            return std::nullopt;
        }
    }
    const Vector w = f2.cwiseProduct(bk.transpose() * mu) / 2.0;
    const Vector fitted = b * w;
    const double slack = 1e-10 * (1.0 + upper.lpNorm<Eigen::Infinity>() + lower.lpNorm<Eigen::Infinity>());
    if ((fitted - upper).maxCoeff() > slack || (lower - fitted).maxCoeff() > slack) {
        return std::nullopt;
    }
    return w;
}

} // namespace

DebiasWeights solve_primal_oracle(const DebiasProblem& problem, const PrimalSettings& settings) {
    validate(problem);
    const Index n_d = problem.group_design.rows();
    const double c = problem.gamma / problem.n_total;
    DebiasWeights out;
    out.source = WeightSource::primal_direct;
    if (problem.z.lpNorm<Eigen::Infinity>() <= c) {
        out.w = Vector::Zero(n_d);
        return out;
    }
    // Constraint B w in [z - c, z + c] with B = X'/sqrt(n).
    const Matrix b = problem.group_design.transpose() / std::sqrt(problem.n_total);
    const Vector f2 = problem.densities.array().square();
    const Vector lower = problem.z.array() - c;
    const Vector upper = problem.z.array() + c;
    const Vector inv_f2 = f2.cwiseInverse();
    const Matrix btb = b.transpose() * b;
    const double rho = 2.0 * inv_f2.sum() / std::max(btb.trace(), 1e-300);
    Matrix system = rho * btb;
    system.diagonal() += 2.0 * inv_f2;
    const Eigen::LLT<Matrix> llt(system);

    Vector t = problem.z;
    Vector u = Vector::Zero(problem.z.size());
    Vector w = Vector::Zero(n_d);
    double primal = 0.0;
    double dual = 0.0;
    for (int iter = 1; iter <= settings.max_iterations; ++iter) {
        w = llt.solve(rho * (b.transpose() * (t - u)));
        const Vector bw = b * w;
        const Vector t_prev = t;
        t = (bw + u).cwiseMax(lower).cwiseMin(upper);
        u += bw - t;
        if (iter % 50 == 0) {
            if (auto exact = primal_active_set(b, f2, lower, upper, bw, u, settings.tolerance)) {
                out.w = std::move(*exact);
                return out;
            }
        }
        if (iter % 10 != 0) {
            continue;
        }
        primal = (bw - t).norm();
        dual = rho * (b.transpose() * (t - t_prev)).norm();
        if (primal <= settings.tolerance * (1.0 + problem.z.norm()) &&
            dual <= settings.tolerance * (1.0 + rho * (b.transpose() * u).norm())) {
            if (auto exact = primal_active_set(b, f2, lower, upper, bw, u, settings.tolerance)) {
                out.w = std::move(*exact);
            } else {
                out.w = w;
            }
            return out;
        }
    }
    const Vector bw = b * w;
    const double violation = std::max((bw - upper).maxCoeff(), (lower - bw).maxCoeff());
    if (violation > 1e-6 * (1.0 + problem.z.lpNorm<Eigen::Infinity>())) {
        throw InfeasibleError("no weights satisfy the box constraint at gamma=" + std::to_string(problem.gamma) +
                              " (violation " + std::to_string(violation) + ")");
    }
    throw ConvergenceError("primal debiasing oracle did not converge", settings.max_iterations, primal, dual);
}

GammaRule parse_gamma_rule(const std::string& name) {
    if (name == "one_se" || name == "1se") return GammaRule::one_se;
    if (name == "two_se" || name == "2se") return GammaRule::two_se;
    if (name == "min") return GammaRule::min;
    throw DomainError("unknown gamma rule '" + name + "' (expected one_se, two_se or min)");
}

std::string to_string(GammaRule rule) {
    switch (rule) {
    case GammaRule::one_se: return "one_se";
    case GammaRule::two_se: return "two_se";
    case GammaRule::min: return "min";
    }
    return "unknown";
}

std::vector<double> default_gamma_grid(const Eigen::Ref<const Vector>& z, double n_total, int points, double ratio) {
    const double gamma_max = n_total * z.lpNorm<Eigen::Infinity>();
    if (!(gamma_max > 0.0) || !std::isfinite(gamma_max)) {
        throw DomainError("gamma grid needs a nonzero, finite z");
    }
    if (points < 1 || !(ratio > 0.0 && ratio < 1.0)) {
        throw DomainError("gamma grid needs at least one point and a ratio in (0,1)");
    }
    std::vector<double> grid(static_cast<std::size_t>(points));
    for (int j = 0; j < points; ++j) {
        const double frac = points == 1 ? 1.0 : static_cast<double>(j) / (points - 1);
        grid[static_cast<std::size_t>(j)] = gamma_max * std::pow(ratio, 1.0 - frac);
    }
    grid.back() = gamma_max;
    return grid;
}

GammaCv cross_validate_gamma(const Eigen::Ref<const Matrix>& group_design, const Eigen::Ref<const Vector>& densities,
                             const Eigen::Ref<const Vector>& z, double n_total, int folds,
                             std::span<const double> grid, GammaRule rule, std::uint64_t rng_seed,
                             const DualSettings& settings, int threads) {
    if (folds < 2) {
        throw DomainError("cross-validation needs at least 2 folds");
    }
    if (grid.empty()) {
        throw DomainError("gamma grid is empty");
    }
    for (std::size_t g = 0; g < grid.size(); ++g) {
        if (!(grid[g] > 0.0) || (g > 0 && !(grid[g] > grid[g - 1]))) {
            throw DomainError("gamma grid must be positive and strictly ascending");
        }
    }
    validate(DebiasProblem{group_design, densities, z, grid.front(), n_total});
    const Index n_d = group_design.rows();
    if (n_d < folds) {
        throw InputError("fewer group rows than cross-validation folds");
    }

    GammaCv cv;
    cv.grid.assign(grid.begin(), grid.end());
    const std::size_t m = grid.size();
    if (m == 1) {
        cv.mean_risk.assign(1, 0.0);
        cv.se_risk.assign(1, 0.0);
        cv.failed_folds.assign(1, 0);
        cv.selected = grid.front();
        return cv;
    }

    // Seeded Fisher-Yates permutation, then round-robin fold labels.
    std::vector<Index> order(static_cast<std::size_t>(n_d));
    std::iota(order.begin(), order.end(), Index{0});
    Rng rng(rng_seed);
    for (Index i = n_d - 1; i > 0; --i) {
        const auto j = static_cast<Index>(rng.next() % static_cast<std::uint64_t>(i + 1));
        std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
    }
    std::vector<int> fold_of(static_cast<std::size_t>(n_d));
    for (Index r = 0; r < n_d; ++r) {
        fold_of[static_cast<std::size_t>(order[static_cast<std::size_t>(r)])] = static_cast<int>(r % folds);
    }

    const double c_full_per_gamma = 1.0 / n_total;
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<std::vector<double>> risk(static_cast<std::size_t>(folds), std::vector<double>(m, inf));

    parallel_for(static_cast<std::size_t>(folds), threads, [&](std::size_t fold) {
        std::vector<Index> train;
        std::vector<Index> test;
        for (Index i = 0; i < n_d; ++i) {
            (fold_of[static_cast<std::size_t>(i)] == static_cast<int>(fold) ? test : train).push_back(i);
        }
        const auto n_train = static_cast<Index>(train.size());
        const auto n_test = static_cast<Index>(test.size());
        Matrix x_train(n_train, group_design.cols());
        Vector f_train(n_train);
        for (Index r = 0; r < n_train; ++r) {
            x_train.row(r) = group_design.row(train[static_cast<std::size_t>(r)]);
            f_train[r] = densities[train[static_cast<std::size_t>(r)]];
        }
        Matrix x_test(n_test, group_design.cols());
        Vector f_test(n_test);
        for (Index r = 0; r < n_test; ++r) {
            x_test.row(r) = group_design.row(test[static_cast<std::size_t>(r)]);
            f_test[r] = densities[test[static_cast<std::size_t>(r)]];
        }
        const double n_train_scaled = n_total * static_cast<double>(n_train) / static_cast<double>(n_d);
        const double n_test_scaled = n_total * static_cast<double>(n_test) / static_cast<double>(n_d);
        DualPath path(quadratic_form(x_train, f_train, n_train_scaled), Vector(z), settings);

        // Largest gamma first so each solve warm-starts from a sparser neighbour.
        std::optional<Vector> warm;
        for (std::size_t g = m; g-- > 0;) {
            try {
                const DualSolution sol = path.solve(grid[g] * c_full_per_gamma, grid[g], warm ? &*warm : nullptr);
                const Vector fitted = f_test.cwiseProduct(x_test * sol.v);
                risk[fold][g] = fitted.squaredNorm() / (4.0 * n_test_scaled) + z.dot(sol.v);
                warm = sol.v;
            } catch (const Error&) {
                warm.reset();
            }
        }
    });

    cv.mean_risk.assign(m, inf);
    cv.se_risk.assign(m, inf);
    cv.failed_folds.assign(m, 0);
    bool any = false;
    for (std::size_t g = 0; g < m; ++g) {
        std::vector<double> values;
        for (int k = 0; k < folds; ++k) {
            if (std::isfinite(risk[static_cast<std::size_t>(k)][g])) {
                values.push_back(risk[static_cast<std::size_t>(k)][g]);
            } else {
                ++cv.failed_folds[g];
            }
        }
        if (cv.failed_folds[g] == 0) {
            cv.mean_risk[g] = mean(values);
            cv.se_risk[g] = std::sqrt(sample_variance(values) / static_cast<double>(folds));
            any = true;
        }
    }
    if (!any) {
        throw InfeasibleError("every gamma on the grid failed in some cross-validation fold");
    }
    std::size_t best = 0;
    for (std::size_t g = 0; g < m; ++g) {
        if (cv.mean_risk[g] < cv.mean_risk[best]) best = g;
    }
    const double k = rule == GammaRule::one_se ? 1.0 : rule == GammaRule::two_se ? 2.0 : 0.0;
    const double threshold = cv.mean_risk[best] + k * cv.se_risk[best];
    std::size_t chosen = best;
    for (std::size_t g = 0; g < m; ++g) {
        if (cv.mean_risk[g] <= threshold) {
            chosen = g;
            break;
        }
    }
    cv.best_index = static_cast<Index>(best);
    cv.selected_index = static_cast<Index>(chosen);
    cv.selected = grid[chosen];
    return cv;
}

double select_gamma(const Eigen::Ref<const Matrix>& group_design, const Eigen::Ref<const Vector>& densities,
                    const Eigen::Ref<const Vector>& z, double n_total, int folds, std::span<const double> grid,
                    GammaRule rule, std::uint64_t rng_seed, const DualSettings& settings, int threads) {
    return cross_validate_gamma(group_design, densities, z, n_total, folds, grid, rule, rng_seed, settings, threads)
        .selected;
}

} // namespace rankscore
