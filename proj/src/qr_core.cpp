#include "rankscore/qr_core.hpp"

#include "rankscore/stats.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>

namespace rankscore {

double check_loss(double u, double tau) {
    require_tau(tau);
    return u > 0.0 ? tau * u : (tau - 1.0) * u;
}

double check_loss_prox(double x, double tau, double sigma) {
    require_tau(tau);
    if (!(sigma > 0.0)) {
        throw DomainError("check-loss prox requires a positive step");
    }
    if (x > sigma * tau) return x - sigma * tau;
    if (x < -sigma * (1.0 - tau)) return x + sigma * (1.0 - tau);
    return 0.0;
}

double qr_objective(const QrProblem& problem, const Eigen::Ref<const Vector>& theta) {
    const Vector residual = problem.response - problem.design * theta;
    double loss = 0.0;
    for (Index i = 0; i < residual.size(); ++i) {
        loss += check_loss(residual[i], problem.tau);
    }
    const double penalty = problem.penalty_weights.size() == 0
                               ? theta.lpNorm<1>()
                               : problem.penalty_weights.cwiseProduct(theta.cwiseAbs()).sum();
    return loss + problem.lambda * penalty;
}

Support support_of(const Eigen::Ref<const Vector>& theta) {
    const double threshold = 1e-6 * std::max(1.0, theta.size() ? theta.lpNorm<Eigen::Infinity>() : 0.0);
    Support support;
    for (Index k = 0; k < theta.size(); ++k) {
        if (std::abs(theta[k]) > threshold) {
            support.push_back(k);
        }
    }
    return support;
}

namespace {

void validate(const QrProblem& problem) {
    require_tau(problem.tau);
    if (problem.design.rows() != problem.response.size()) {
        throw InputError("design rows (" + std::to_string(problem.design.rows()) + ") != response length (" +
                         std::to_string(problem.response.size()) + ")");
    }
    if (problem.design.cols() == 0 || problem.design.rows() == 0) {
        throw InputError("empty quantile regression problem");
    }
    if (!(problem.lambda >= 0.0) || !std::isfinite(problem.lambda)) {
        throw DomainError("penalty level must be finite and nonnegative");
    }
    if (problem.penalty_weights.size() != 0) {
        if (problem.penalty_weights.size() != problem.design.cols()) {
            throw InputError("penalty weight length does not match design columns");
        }
        if (!problem.penalty_weights.allFinite() || (problem.penalty_weights.array() < 0.0).any()) {
            throw DomainError("penalty weights must be finite and nonnegative");
        }
    }
    if (!problem.design.allFinite() || !problem.response.allFinite()) {
        throw InputError("non-finite values in quantile regression data");
    }
}

// Solves (X'X + cI) theta = b, through the p x p system when p <= n, else via Woodbury on cI + XX'.
class RidgeSystem {
public:
    RidgeSystem(const Eigen::Ref<const Matrix>& x, double c) : x_(x), c_(c), wide_(x.cols() > x.rows()) {
        if (wide_) {
            Matrix k = x * x.transpose();
            k.diagonal().array() += c;
            llt_.compute(k);
        } else {
            Matrix g = x.transpose() * x;
            g.diagonal().array() += c;
            llt_.compute(g);
        }
    }

    Vector solve(const Vector& b) const {
        if (wide_) {
            return (b - x_.transpose() * llt_.solve(x_ * b)) / c_;
        }
        return llt_.solve(b);
    }

private:
    Eigen::Ref<const Matrix> x_;
    double c_;
    bool wide_;
    Eigen::LLT<Matrix> llt_;
};


// Mean absolute deviation of the response about its median; 1 for a constant response.
double response_scale(const Eigen::Ref<const Vector>& y) {
    std::vector<double> values(y.data(), y.data() + y.size());
    const double center = median(values);
    const double mad = (y.array() - center).abs().mean();
    return mad > 0.0 && std::isfinite(mad) ? mad : 1.0;
}

struct PolishedSolution {
    Vector theta;
    Vector subgradient;
    double kkt_violation = 0.0;
};

// Crossover from an approximate ADMM iterate to an exact vertex of the quantile regression LP.
// With S the nonzero coordinates of the iterate, interpolate |S| observations with the smallest
// residuals, then solve for the subgradient on the interpolated rows and certify the KKT system:
//   g_i = tau - 1{r_i < 0} off the interpolated rows, g_Z in [tau - 1, tau],
//   X_S' g = lambda w_S sign(theta_S),  |X_k' g| <= lambda w_k off S.
std::optional<PolishedSolution> polish(const Eigen::Ref<const Matrix>& x, const Eigen::Ref<const Vector>& y,
                                       double tau, const Vector& thresholds, const Vector& iterate,
                                       const Vector* multipliers) {
    const Index n = x.rows();
    const Index p = x.cols();
    const Support support = support_of(iterate);
    const auto q = static_cast<Index>(support.size());
    if (q > n) {
        return std::nullopt;
    }
    Matrix xs(n, q);
    for (Index j = 0; j < q; ++j) {
        xs.col(j) = x.col(support[static_cast<std::size_t>(j)]);
    }
    Vector theta_s(q);
    for (Index j = 0; j < q; ++j) {
        theta_s[j] = iterate[support[static_cast<std::size_t>(j)]];
    }
    const Vector approx_residual = y - xs * theta_s;
    std::vector<Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), Index{0});
    if (multipliers) {
        // Interpolated rows carry multipliers strictly inside (tau - 1, tau).
        auto depth = [&](Index i) { return std::min((*multipliers)[i] - (tau - 1.0), tau - (*multipliers)[i]); };
        std::sort(order.begin(), order.end(), [&](Index a, Index b) { return depth(a) > depth(b); });
    } else {
        std::sort(order.begin(), order.end(), [&](Index a, Index b) {
            return std::abs(approx_residual[a]) < std::abs(approx_residual[b]);
        });
    }

    // Greedily collect q linearly independent rows of X_S, preferring the front of `order`
    // (incremental Gram-Schmidt on the accepted rows).
    std::vector<Index> rows;
    rows.reserve(static_cast<std::size_t>(q));
    Matrix basis(q, q);
    Matrix chosen(q, q);
    for (Index candidate : order) {
        const auto k = static_cast<Index>(rows.size());
        if (k == q) break;
        const Vector row = xs.row(candidate).transpose();
        Vector residual_row = row;
        for (int pass = 0; pass < 2; ++pass) {
            residual_row -= basis.leftCols(k) * (basis.leftCols(k).transpose() * residual_row);
        }
        const double norm = residual_row.norm();
        if (norm > 1e-8 * std::max(1.0, row.norm())) {
            basis.col(k) = residual_row / norm;
            chosen.row(k) = row.transpose();
            rows.push_back(candidate);
        }
    }
    if (static_cast<Index>(rows.size()) != q) {
        return std::nullopt;
    }

    Vector polished_s = Vector::Zero(q);
    Eigen::PartialPivLU<Matrix> lu;
    if (q > 0) {
        Vector rhs(q);
        for (Index j = 0; j < q; ++j) rhs[j] = y[rows[static_cast<std::size_t>(j)]];
        lu.compute(chosen);
        polished_s = lu.solve(rhs);
        for (Index j = 0; j < q; ++j) {
            if (polished_s[j] == 0.0 || (polished_s[j] > 0.0) != (theta_s[j] > 0.0)) {
                return std::nullopt;
            }
        }
    }
    const Vector residual = y - xs * polished_s;
    std::vector<bool> interpolated(static_cast<std::size_t>(n), false);
    for (Index i : rows) interpolated[static_cast<std::size_t>(i)] = true;

    Vector g(n);
    for (Index i = 0; i < n; ++i) {
        if (!interpolated[static_cast<std::size_t>(i)]) {
            g[i] = residual[i] < 0.0 ? tau - 1.0 : tau;
            if (residual[i] == 0.0) {
                return std::nullopt;
            }
        }
    }
    if (q > 0) {
        Vector target(q);
        for (Index j = 0; j < q; ++j) {
            const Index k = support[static_cast<std::size_t>(j)];
            target[j] = thresholds[k] * (polished_s[j] > 0.0 ? 1.0 : -1.0);
        }
        Vector known = Vector::Zero(q);
        for (Index i = 0; i < n; ++i) {
            if (!interpolated[static_cast<std::size_t>(i)]) known += g[i] * xs.row(i).transpose();
        }
        const Vector g_rows = lu.transpose().solve(target - known);
        for (Index j = 0; j < q; ++j) g[rows[static_cast<std::size_t>(j)]] = g_rows[j];
    }

    const double slack = 1e-9 * (1.0 + x.cwiseAbs().colwise().sum().maxCoeff());
    double violation = 0.0;
    for (Index i = 0; i < n; ++i) {
        violation = std::max({violation, g[i] - tau, tau - 1.0 - g[i]});
    }
    const Vector score = x.transpose() * g;
    std::vector<bool> on_support(static_cast<std::size_t>(p), false);
    for (Index k : support) on_support[static_cast<std::size_t>(k)] = true;
    for (Index k = 0; k < p; ++k) {
        if (on_support[static_cast<std::size_t>(k)]) {
            continue;
        }
        violation = std::max(violation, std::abs(score[k]) - thresholds[k]);
    }
    if (violation > slack) {
        return std::nullopt;
    }
    PolishedSolution out;
    out.theta = Vector::Zero(p);
    for (Index j = 0; j < q; ++j) out.theta[support[static_cast<std::size_t>(j)]] = polished_s[j];
    out.subgradient = g.cwiseMax(tau - 1.0).cwiseMin(tau);
    out.kkt_violation = std::max(0.0, violation);
    return out;
}


// Tries the crossover on the iterate and on copies with its smallest coefficients zeroed,
// since ADMM drives inactive coordinates to zero slowly.
std::optional<PolishedSolution> polish_any(const Eigen::Ref<const Matrix>& x, const Eigen::Ref<const Vector>& y,
                                           double tau, const Vector& thresholds, const Vector& iterate,
                                           const Vector& multipliers) {
    if (auto out = polish(x, y, tau, thresholds, iterate, nullptr)) {
        return out;
    }
    if (auto out = polish(x, y, tau, thresholds, iterate, &multipliers)) {
        return out;
    }
    const double top = iterate.size() ? iterate.lpNorm<Eigen::Infinity>() : 0.0;
    Index previous_nonzeros = (iterate.array() != 0.0).count();
    for (double cut : {1e-4, 1e-3, 1e-2, 5e-2}) {
        Vector trimmed = (iterate.array().abs() > cut * top).select(iterate, 0.0);
        const Index nonzeros = (trimmed.array() != 0.0).count();
        if (nonzeros == previous_nonzeros) {
            continue;
        }
        previous_nonzeros = nonzeros;
        if (auto out = polish(x, y, tau, thresholds, trimmed, nullptr)) {
            return out;
        }
        if (auto out = polish(x, y, tau, thresholds, trimmed, &multipliers)) {
            return out;
        }
    }
    return std::nullopt;
}

} // namespace

QrFit solve_penalized_qr(const QrProblem& problem, const QrSettings& settings) {
    validate(problem);
    const auto& x = problem.design;
    // Scaling y and theta together scales the objective, so the fit is done on the unit response scale.
    const double scale = response_scale(problem.response);
    const Vector y = problem.response / scale;
    const Index n = x.rows();
    const Index p = x.cols();
    const double tau = problem.tau;
    const Vector weights = problem.penalty_weights.size() ? problem.penalty_weights : Vector::Ones(p);
    const Vector thresholds = problem.lambda * weights;

    // Splitting: r = y - X theta (check-loss block), sqrt(c) (theta - s) = 0 (weighted l1 block), with
    // c the mean diagonal of X'X so both blocks carry comparable weight. Both blocks share rho, so the
    // theta-update system does not depend on rho. `eta` is the scaled multiplier divided by sqrt(c).
    // Without a penalty the second block only damps the theta-update, so it is made light.
    const double mean_diag = std::max(1e-8, x.squaredNorm() / static_cast<double>(p));
    const double c = thresholds.maxCoeff() > 0.0 ? mean_diag : 1e-4 * mean_diag;
    const RidgeSystem system(x, c);
    double rho = settings.rho;
    Vector theta = Vector::Zero(p);
    Vector s = Vector::Zero(p);
    Vector r = y;
    Vector u = Vector::Zero(n);
    Vector eta = Vector::Zero(p);
    Vector r_prev = r;
    Vector s_prev = s;
    Vector fitted(n);
    Vector fitted_hat(n);
    Vector theta_hat(p);
    const double alpha = settings.relaxation;

    const double y_norm = y.norm();
    double primal = 0.0;
    double dual = 0.0;
    bool converged = false;
    std::optional<PolishedSolution> polished;
    int iter = 0;
    const int check = std::max(1, settings.check_interval);
    while (iter < settings.max_iterations) {
        ++iter;
        theta = system.solve(x.transpose() * (y - r + u) + c * (s - eta));
        fitted.noalias() = x * theta;

        r_prev.swap(r);
        s_prev.swap(s);
        // Over-relaxed copies of X theta and theta.
        fitted_hat = alpha * fitted + (1.0 - alpha) * (y - r_prev);
        theta_hat = alpha * theta + (1.0 - alpha) * s_prev;
        const double sigma = 1.0 / rho;
        for (Index i = 0; i < n; ++i) {
            const double v = y[i] - fitted_hat[i] + u[i];
            r[i] = v > sigma * tau ? v - sigma * tau : (v < -sigma * (1.0 - tau) ? v + sigma * (1.0 - tau) : 0.0);
        }
        for (Index k = 0; k < p; ++k) {
            s[k] = soft_threshold(theta_hat[k] + eta[k], thresholds[k] / (rho * c));
        }
        u += y - fitted_hat - r;
        eta += theta_hat - s;

        if (iter % check != 0 && iter != settings.max_iterations) {
            continue;
        }
        primal = std::sqrt((y - fitted - r).squaredNorm() + c * (theta - s).squaredNorm());
        dual = rho * (x.transpose() * (r - r_prev) - c * (s - s_prev)).norm();
        const double scale_primal =
            std::max({std::sqrt(fitted.squaredNorm() + c * theta.squaredNorm()),
                      std::sqrt(r.squaredNorm() + c * s.squaredNorm()), y_norm});
        const double scale_dual = rho * (x.transpose() * u + c * eta).norm();
        const double eps_primal = settings.tolerance * (1.0 + scale_primal);
        const double eps_dual = settings.tolerance * (1.0 + scale_dual);
        if (primal <= eps_primal && dual <= eps_dual) {
            converged = true;
            break;
        }
        if (settings.polish && iter % std::max(check, settings.polish_interval) == 0) {
            polished = polish_any(x, y, tau, thresholds, s, Vector(rho * u));
            if (polished) {
                converged = true;
                break;
            }
        }
        if (settings.adaptive_rho && iter % std::max(check, settings.balance_interval) == 0) {
            const double primal_ratio = primal / eps_primal;
            const double dual_ratio = dual / eps_dual;
            if (primal_ratio > settings.balance_ratio * dual_ratio) {
                rho *= settings.rho_factor;
                u /= settings.rho_factor;
                eta /= settings.rho_factor;
            } else if (dual_ratio > settings.balance_ratio * primal_ratio) {
                rho /= settings.rho_factor;
                u *= settings.rho_factor;
                eta *= settings.rho_factor;
            }
        }
    }
    if (!converged && !settings.allow_unconverged) {
        throw ConvergenceError("penalized quantile regression did not converge", iter, primal, dual);
    }

    if (converged && !polished && settings.polish) {
        // Tolerance met; the crossover usually sharpens the iterate to the exact vertex.
        polished = polish_any(x, y, tau, thresholds, s, Vector(rho * u));
    }
    if (polished) {
        s = polished->theta;
        primal = 0.0;
        dual = polished->kkt_violation;
    }

    QrFit fit;
    fit.theta = scale * s;
    fit.support = support_of(fit.theta);
    fit.tau = tau;
    fit.lambda = problem.lambda;
    fit.objective = qr_objective(problem, fit.theta);
    fit.iterations = iter;
    fit.primal_residual = primal;
    fit.dual_residual = dual;
    fit.converged = converged;
    fit.subgradient = polished ? polished->subgradient : Vector(rho * u);
    return fit;
}

QrFit refit_qr(const Eigen::Ref<const Matrix>& design, const Eigen::Ref<const Vector>& response, double tau,
               const Support& support, const QrSettings& settings) {
    Support columns = support;
    if (columns.empty()) {
        const bool has_intercept = design.cols() > 0 && (design.col(0).array() == 1.0).all();
        if (!has_intercept) {
            throw InputError("refit on an empty support requires an intercept column");
        }
        columns.push_back(0);
    }
    for (Index k : columns) {
        if (k < 0 || k >= design.cols()) {
            throw InputError("support index " + std::to_string(k) + " outside design columns");
        }
    }
    Matrix sub(design.rows(), static_cast<Index>(columns.size()));
    for (std::size_t j = 0; j < columns.size(); ++j) {
        sub.col(static_cast<Index>(j)) = design.col(columns[j]);
    }
    const QrFit restricted = solve_penalized_qr(QrProblem{sub, response, tau, 0.0, {}}, settings);

    QrFit fit = restricted;
    fit.theta = Vector::Zero(design.cols());
    for (std::size_t j = 0; j < columns.size(); ++j) {
        fit.theta[columns[j]] = restricted.theta[static_cast<Index>(j)];
    }
    fit.support = support_of(fit.theta);
    return fit;
}

Vector column_loadings(const Eigen::Ref<const Matrix>& design) {
    if (design.rows() == 0) {
        throw InputError("column loadings of an empty design");
    }
    Vector loadings = (design.colwise().squaredNorm() / static_cast<double>(design.rows())).cwiseSqrt().transpose();
    for (Index k = 0; k < loadings.size(); ++k) {
        if (!(loadings[k] > 0.0)) {
            throw InputError("degenerate design column " + std::to_string(k) + " (zero loading)");
        }
    }
    return loadings;
}

double select_lambda(const Eigen::Ref<const Matrix>& design_group, std::span<const double> tau_grid, int n_sim,
                     double level, double multiplier, std::uint64_t rng_seed) {
    if (n_sim < 100) {
        throw DomainError("select_lambda needs at least 100 replicates");
    }
    if (!(level > 0.0 && level < 1.0)) {
        throw DomainError("select_lambda level must lie in (0,1)");
    }
    if (tau_grid.empty()) {
        throw DomainError("select_lambda needs a nonempty quantile grid");
    }
    for (double tau : tau_grid) {
        require_tau(tau);
    }
    const Vector loadings = column_loadings(design_group);
    const Index n = design_group.rows();
    const auto m = static_cast<Index>(tau_grid.size());

    Rng rng(rng_seed);
    std::vector<double> replicates(static_cast<std::size_t>(n_sim));
    constexpr int kBatch = 32;
    Matrix scores(n, kBatch * m);
    Vector uniforms(n);
    for (int start = 0; start < n_sim; start += kBatch) {
        const int batch = std::min(kBatch, n_sim - start);
        for (int b = 0; b < batch; ++b) {
            for (Index i = 0; i < n; ++i) {
                uniforms[i] = rng.uniform();
            }
            for (Index j = 0; j < m; ++j) {
                const double tau = tau_grid[static_cast<std::size_t>(j)];
                auto col = scores.col(b * m + j);
                for (Index i = 0; i < n; ++i) {
                    col[i] = tau - (uniforms[i] <= tau ? 1.0 : 0.0);
                }
            }
        }
        const Matrix sums = design_group.transpose() * scores.leftCols(batch * m);
        for (int b = 0; b < batch; ++b) {
            double sup = 0.0;
            for (Index j = 0; j < m; ++j) {
                const double tau = tau_grid[static_cast<std::size_t>(j)];
                const double scale = std::sqrt(tau * (1.0 - tau));
                const double stat = (sums.col(b * m + j).cwiseAbs().cwiseQuotient(loadings)).maxCoeff() / scale;
                sup = std::max(sup, stat);
            }
            replicates[static_cast<std::size_t>(start + b)] = sup;
        }
    }
    return multiplier * empirical_quantile(replicates, level);
}

double GroupPenalty::level_lambda(double tau) const {
    return weighted ? lambda * std::sqrt(tau * (1.0 - tau)) : lambda;
}

GroupFitter::GroupFitter(const Matrix& design, const Vector& response, GroupPenalty penalty, QrSettings settings)
    : design_(design), response_(response), penalty_(std::move(penalty)), settings_(settings) {
    if (penalty_.weighted && penalty_.loadings.size() == 0) {
        penalty_.loadings = column_loadings(design_);
    }
}

const QrFit& GroupFitter::penalized(double tau) {
    {
        std::lock_guard lock(mutex_);
        if (auto it = penalized_.find(tau); it != penalized_.end()) {
            return it->second;
        }
    }
    QrProblem problem{design_, response_, tau, penalty_.level_lambda(tau),
                      penalty_.weighted ? penalty_.loadings : Vector{}};
    QrFit fit = solve_penalized_qr(problem, settings_);
    std::lock_guard lock(mutex_);
    return penalized_.try_emplace(tau, std::move(fit)).first->second;
}

const QrFit& GroupFitter::refit(double tau) {
    {
        std::lock_guard lock(mutex_);
        if (auto it = refit_.find(tau); it != refit_.end()) {
            return it->second;
        }
    }
    const Support support = penalized(tau).support;
    QrFit fit = refit_qr(design_, response_, tau, support, settings_);
    std::lock_guard lock(mutex_);
    return refit_.try_emplace(tau, std::move(fit)).first->second;
}

} // namespace rankscore
