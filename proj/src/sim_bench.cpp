#include "rankscore/sim_bench.hpp"

#include "rankscore/density_est.hpp"
#include "rankscore/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

namespace rankscore {

void SimDesign::validate() const {
    if (p < 9) {
        throw DomainError("simulation design needs p >= 9 (the propensity uses X7 and X8)");
    }
    if (n < 20) {
        throw DomainError("simulation design needs n >= 20");
    }
    if (!(theta1_norm > 0.0) || !std::isfinite(theta1_norm)) {
        throw DomainError("theta1 norm must be positive");
    }
}

SimDesign parse_design(const std::string& name) {
    SimDesign design;
    std::string rest;
    if (name.rfind("homo-", 0) == 0) {
        design.noise = Noise::homoscedastic;
        rest = name.substr(5);
    } else if (name.rfind("hetero-", 0) == 0) {
        design.noise = Noise::heteroscedastic;
        rest = name.substr(7);
    } else {
        throw DomainError("unknown design '" + name + "' (expected homo-<shape> or hetero-<shape>)");
    }
    if (rest == "sparse") {
        design.theta1_shape = ThetaShape::sparse;
    } else if (rest == "pseudo-dense") {
        design.theta1_shape = ThetaShape::pseudo_dense;
    } else if (rest == "dense") {
        design.theta1_shape = ThetaShape::dense;
    } else {
        throw DomainError("unknown theta1 shape '" + rest + "' (expected sparse, pseudo-dense or dense)");
    }
    return design;
}

std::string design_name(const SimDesign& design) {
    const std::string noise = design.noise == Noise::homoscedastic ? "homo" : "hetero";
    const std::string shape = design.theta1_shape == ThetaShape::sparse         ? "sparse"
                              : design.theta1_shape == ThetaShape::pseudo_dense ? "pseudo-dense"
                                                                                 : "dense";
    return noise + "-" + shape;
}

Vector true_theta0(Index p) {
    Vector theta = Vector::Zero(p);
    theta[0] = 0.5;
    theta[2] = 1.0;
    theta[3] = -1.0;
    return theta;
}

Vector true_theta1(const SimDesign& design) {
    design.validate();
    Vector theta = Vector::Zero(design.p);
    for (Index j = 0; j < design.p; ++j) {
        const double k = static_cast<double>(j + 1);
        switch (design.theta1_shape) {
        case ThetaShape::sparse: theta[j] = j < 6 ? 1.0 : 0.0; break;
        case ThetaShape::pseudo_dense: theta[j] = 1.0 / k; break;
        case ThetaShape::dense: theta[j] = 1.0 / std::sqrt(k); break;
        }
    }
    return theta * (design.theta1_norm / theta.norm());
}

Vector design_z(const SimDesign& design) {
    design.validate();
    Vector z = Vector::Zero(design.p);
    if (design.z_shape == ZShape::sparse) {
        z[1] = z[2] = 1.0 / std::sqrt(2.0);
    } else {
        z[0] = 1.0;
        for (Index j = 1; j < design.p; ++j) {
            z[j] = 1.0 / std::sqrt(static_cast<double>(j));
        }
    }
    return z;
}

Vector true_quantile_coefficients(const SimDesign& design, int arm, double tau) {
    require_tau(tau);
    Vector theta = arm == 1 ? true_theta1(design) : true_theta0(design.p);
    const double shift = normal_quantile(tau);
    if (design.noise == Noise::homoscedastic) {
        theta[0] += shift;
    } else {
        // sigma_0(X) = X_2, sigma_1(X) = X_3.
        theta[arm == 1 ? 2 : 1] += shift;
    }
    return theta;
}

Support true_support(const SimDesign& design, int arm) {
    const Vector theta = arm == 1 ? true_theta1(design) : true_theta0(design.p);
    Support support;
    for (Index j = 0; j < design.p; ++j) {
        const bool scale_column = design.noise == Noise::heteroscedastic && j == (arm == 1 ? 2 : 1);
        if (j == 0 || theta[j] != 0.0 || scale_column) {
            support.push_back(j);
        }
    }
    return support;
}

double true_alpha(const SimDesign& design, double tau) {
    const Vector z = design_z(design);
    return z.dot(true_quantile_coefficients(design, 1, tau) - true_quantile_coefficients(design, 0, tau));
}

double propensity(const Eigen::Ref<const Vector>& x_row) {
    if (x_row.size() < 8) {
        throw InputError("propensity needs at least 8 covariates");
    }
    const double eta = 1.0 - x_row[6] + x_row[7];
    return 1.0 / (1.0 + std::exp(-eta));
}

Dataset generate_dataset(const SimDesign& design, Rng& rng) {
    design.validate();
    const Index n = design.n;
    const Index p = design.p;
    const Vector theta0 = true_theta0(p);
    const Vector theta1 = true_theta1(design);
    const double innovation = std::sqrt(1.0 - 0.25);

    Dataset data;
    data.y.resize(n);
    data.d.resize(static_cast<std::size_t>(n));
    data.x.resize(n, p);
    data.column_names.push_back("intercept");
    for (Index j = 1; j < p; ++j) {
        data.column_names.push_back("x" + std::to_string(j));
    }
    Vector row(p);
    for (Index i = 0; i < n; ++i) {
        // Stationary AR(1) recursion with coefficient 0.5 gives Cov(W_j, W_k) = 0.5^|j-k|.
        row[0] = 1.0;
        double w = rng.normal();
        row[1] = w;
        for (Index j = 2; j < p; ++j) {
            w = 0.5 * w + innovation * rng.normal();
            row[j] = w;
        }
        double sigma0 = 1.0;
        double sigma1 = 1.0;
        if (design.noise == Noise::heteroscedastic) {
            row[1] = std::abs(row[1]) + 0.1;
            row[2] = row[2] * row[2] + 0.5;
            sigma0 = row[1];
            sigma1 = row[2];
        }
        const double eps = rng.normal();
        const int d = rng.uniform() < propensity(row) ? 1 : 0;
        data.y[i] = d == 1 ? row.dot(theta1) + eps * sigma1 : row.dot(theta0) + eps * sigma0;
        data.d[static_cast<std::size_t>(i)] = d;
        data.x.row(i) = row.transpose();
    }
    return data;
}

std::string to_string(Estimator estimator) {
    switch (estimator) {
    case Estimator::rank_1se: return "rank_1se";
    case Estimator::rank_2se: return "rank_2se";
    case Estimator::oracle: return "oracle";
    case Estimator::refit: return "refit";
    case Estimator::lasso: return "lasso";
    }
    return "unknown";
}

Estimator parse_estimator(const std::string& name) {
    for (Estimator e : {Estimator::rank_1se, Estimator::rank_2se, Estimator::oracle, Estimator::refit,
                        Estimator::lasso}) {
        if (name == to_string(e)) return e;
    }
    throw DomainError("unknown estimator '" + name + "'");
}

namespace {

struct ArmContext {
    Matrix x;
    Vector y;
    std::unique_ptr<GroupFitter> fitter;
};

ArmContext make_arm(const Dataset& data, int arm, std::span<const double> tau_grid, const EstimateOptions& options) {
    const std::vector<Index> rows = data.arm_rows(arm);
    if (rows.empty()) {
        throw InputError("treatment arm " + std::to_string(arm) + " has no observations");
    }
    ArmContext ctx;
    ctx.x.resize(static_cast<Index>(rows.size()), data.columns());
    ctx.y.resize(static_cast<Index>(rows.size()));
    for (std::size_t r = 0; r < rows.size(); ++r) {
        ctx.x.row(static_cast<Index>(r)) = data.x.row(rows[r]);
        ctx.y[static_cast<Index>(r)] = data.y[rows[r]];
    }
    ctx.fitter = std::make_unique<GroupFitter>(ctx.x, ctx.y, select_arm_penalty(ctx.x, tau_grid, options, arm),
                                               options.qr);
    return ctx;
}

// n_d Var(z'theta_S) = tau(1-tau) z_S' J^{-1} S J^{-1} z_S, densities from tau +- h fits on S.
double sandwich(const ArmContext& ctx, double tau, const Support& support, const Vector& z, double n_total,
                const EstimateOptions& options) {
    const Index n_d = ctx.x.rows();
    const auto s = static_cast<Index>(support.size());
    if (s >= n_d) {
        throw InputError("sandwich variance needs fewer support columns than arm rows");
    }
    const double h = options.bandwidth ? *options.bandwidth : bandwidth(tau, static_cast<Index>(n_total));
    const QrFit upper = refit_qr(ctx.x, ctx.y, tau + h, support, options.qr);
    const QrFit lower = refit_qr(ctx.x, ctx.y, tau - h, support, options.qr);
    const DensitySlice f = densities_from_coefficients(ctx.x, upper.theta, lower.theta, tau, h);
    Matrix xs(n_d, s);
    Vector zs(s);
    for (Index j = 0; j < s; ++j) {
        xs.col(j) = ctx.x.col(support[static_cast<std::size_t>(j)]);
        zs[j] = z[support[static_cast<std::size_t>(j)]];
    }
    const Matrix j_mat = xs.transpose() * f.values.asDiagonal() * xs / static_cast<double>(n_d);
    const Matrix s_mat = xs.transpose() * xs / static_cast<double>(n_d);
    const Eigen::FullPivLU<Matrix> lu(j_mat);
    if (!lu.isInvertible()) {
        throw InputError("sandwich variance: singular density-weighted Gram matrix");
    }
    const Vector a = lu.solve(zs);
    return tau * (1.0 - tau) * a.dot(s_mat * a);
}

ComparatorResult comparator_from_arms(std::array<ArmContext, 2>& arms, const Eigen::Ref<const Vector>& z, double tau,
                                      Estimator which, const ComparatorOptions& options, double n_total) {
    double alpha = 0.0;
    double sigma2 = 0.0;
    const Vector zv = z;
    for (int arm = 0; arm < 2; ++arm) {
        ArmContext& ctx = arms[static_cast<std::size_t>(arm)];
        Support support;
        Vector theta;
        switch (which) {
        case Estimator::oracle: {
            support = options.oracle_support[static_cast<std::size_t>(arm)];
            if (support.empty()) {
                throw DomainError("oracle comparator needs the true support");
            }
            theta = refit_qr(ctx.x, ctx.y, tau, support, options.estimate.qr).theta;
            break;
        }
        case Estimator::refit: {
            const QrFit& fit = ctx.fitter->refit(tau);
            theta = fit.theta;
            support = ctx.fitter->penalized(tau).support;
            break;
        }
        case Estimator::lasso: {
            const QrFit& fit = ctx.fitter->penalized(tau);
            theta = fit.theta;
            support = fit.support;
            break;
        }
        default: throw DomainError("comparator_fit handles oracle, refit and lasso only");
        }
        if (support.empty()) {
            support.push_back(0);
        }
        const double contribution = sandwich(ctx, tau, support, zv, n_total, options.estimate);
        const double n_d = static_cast<double>(ctx.x.rows());
        sigma2 += n_total / n_d * contribution;
        alpha += (arm == 1 ? 1.0 : -1.0) * zv.dot(theta);
    }
    ComparatorResult out;
    out.alpha_hat = alpha;
    out.sigma2 = sigma2;
    const auto [low, high] = pointwise_ci(alpha, sigma2, n_total, options.estimate.level);
    out.ci_low = low;
    out.ci_high = high;
    return out;
}

} // namespace

ComparatorResult comparator_fit(const Dataset& data, const Eigen::Ref<const Vector>& z, double tau,
                                Estimator which, const ComparatorOptions& options) {
    data.validate();
    require_tau(tau);
    if (z.size() != data.columns()) {
        throw InputError("z length does not match design columns");
    }
    const std::vector<double> grid{tau};
    std::array<ArmContext, 2> arms{make_arm(data, 0, grid, options.estimate), make_arm(data, 1, grid, options.estimate)};
    return comparator_from_arms(arms, z, tau, which, options, static_cast<double>(data.size()));
}

McMetrics run_monte_carlo(const SimDesign& design, const McOptions& options) {
    design.validate();
    if (options.n_reps < 2) {
        throw DomainError("Monte Carlo needs at least 2 replications");
    }
    if (options.tau_list.empty() || options.estimators.empty()) {
        throw DomainError("Monte Carlo needs quantile levels and estimators");
    }
    for (std::size_t j = 0; j < options.tau_list.size(); ++j) {
        require_tau(options.tau_list[j]);
        if (j > 0 && !(options.tau_list[j] > options.tau_list[j - 1])) {
            throw DomainError("quantile levels must be strictly ascending");
        }
    }
    const Vector z = design_z(design);
    const std::size_t n_est = options.estimators.size();
    const std::size_t m = options.tau_list.size();
    const auto n_total = static_cast<double>(design.n);

    McMetrics metrics;
    metrics.design = design;
    metrics.attempted = options.n_reps;
    metrics.records.resize(static_cast<std::size_t>(options.n_reps));

    parallel_for(static_cast<std::size_t>(options.n_reps), options.threads, [&](std::size_t r) {
        McRecord& record = metrics.records[r];
        try {
            Rng rng = Rng::substream(options.seed, options.common_substream ? 0 : r);
            const Dataset data = generate_dataset(design, rng);
            EstimateOptions est = options.estimate;
            est.seed = rng.next();
            est.band = false;
            est.integrate = false;
            est.threads = 1;

            std::vector<std::vector<ComparatorResult>> results(n_est, std::vector<ComparatorResult>(m));
            std::optional<std::array<ArmContext, 2>> arms;
            ComparatorOptions comp;
            comp.estimate = est;
            comp.oracle_support = {true_support(design, 0), true_support(design, 1)};
            for (std::size_t e = 0; e < n_est; ++e) {
                const Estimator which = options.estimators[e];
                if (which == Estimator::rank_1se || which == Estimator::rank_2se) {
                    EstimateOptions rank = est;
                    rank.gamma_rule = which == Estimator::rank_1se ? GammaRule::one_se : GammaRule::two_se;
                    const HqteResult fit = estimate_full(data, z, options.tau_list, rank);
                    for (std::size_t j = 0; j < m; ++j) {
                        results[e][j] = {fit.alpha_hat[j], fit.ci_low[j], fit.ci_high[j], fit.sigma2[j]};
                    }
                } else {
                    if (!arms) {
                        arms.emplace(std::array<ArmContext, 2>{make_arm(data, 0, options.tau_list, est),
                                                               make_arm(data, 1, options.tau_list, est)});
                    }
                    for (std::size_t j = 0; j < m; ++j) {
                        results[e][j] = comparator_from_arms(*arms, z, options.tau_list[j], which, comp, n_total);
                    }
                }
            }
            record.results = std::move(results);
            record.ok = true;
        } catch (const Error& e) {
            record.ok = false;
            record.error = e.what();
        }
    });

    for (const McRecord& record : metrics.records) {
        if (!record.ok) ++metrics.failures;
    }
    if (10 * metrics.failures > metrics.attempted) {
        std::string first;
        for (const McRecord& record : metrics.records) {
            if (!record.ok) {
                first = record.error;
                break;
            }
        }
        throw Error(std::to_string(metrics.failures) + " of " + std::to_string(metrics.attempted) +
                    " replications failed (more than 10%); first error: " + first);
    }

    const double root_n = std::sqrt(n_total);
    for (std::size_t e = 0; e < n_est; ++e) {
        for (std::size_t j = 0; j < m; ++j) {
            McRow row;
            row.estimator = options.estimators[e];
            row.tau = options.tau_list[j];
            row.truth = true_alpha(design, row.tau);
            std::vector<double> estimates;
            std::vector<double> standardized;
            double covered = 0.0;
            double length = 0.0;
            for (const McRecord& record : metrics.records) {
                if (!record.ok) continue;
                const ComparatorResult& res = record.results[e][j];
                estimates.push_back(res.alpha_hat);
                covered += (res.ci_low <= row.truth && row.truth <= res.ci_high) ? 1.0 : 0.0;
                length += res.ci_high - res.ci_low;
                if (res.sigma2 > 0.0) {
                    standardized.push_back(root_n * (res.alpha_hat - row.truth) / std::sqrt(res.sigma2));
                }
            }
            const auto reps = static_cast<double>(estimates.size());
            row.replications = static_cast<int>(estimates.size());
            if (row.replications == 0) {
                metrics.rows.push_back(row);
                continue;
            }
            const double var = sample_variance(estimates);
            row.sqrt_n_bias = root_n * (mean(estimates) - row.truth);
            row.sqrt_n_bias_se = root_n * std::sqrt(var / reps);
            row.n_variance = n_total * var;
            row.n_variance_se = reps > 1.0 ? row.n_variance * std::sqrt(2.0 / (reps - 1.0)) : 0.0;
            row.coverage = covered / reps;
            row.coverage_se = std::sqrt(row.coverage * (1.0 - row.coverage) / reps);
            row.mean_ci_length = length / reps;
            if (!standardized.empty()) {
                row.standardized_mean = mean(standardized);
                row.standardized_variance = sample_variance(standardized);
            }
            metrics.rows.push_back(row);
        }
    }
    return metrics;
}

} // namespace rankscore
