#include "rankscore/hqte_inference.hpp"

#include "rankscore/parallel.hpp"
#include "rankscore/stats.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace rankscore {

namespace {

std::string tau_label(double tau) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6g", tau);
    return buf;
}

void require_level(double level) {
    if (!(level > 0.0 && level < 1.0)) {
        throw DomainError("confidence level must lie in (0,1)");
    }
}

void require_square(const Eigen::Ref<const Matrix>& m, std::size_t size, const char* name) {
    if (m.rows() != static_cast<Index>(size) || m.cols() != static_cast<Index>(size)) {
        throw InputError(std::string(name) + " must be " + std::to_string(size) + "x" + std::to_string(size));
    }
}

std::vector<double> trapezoid_weights(std::span<const double> grid) {
    const std::size_t m = grid.size();
    std::vector<double> omega(m, 0.0);
    for (std::size_t j = 0; j + 1 < m; ++j) {
        const double width = grid[j + 1] - grid[j];
        if (!(width > 0.0)) {
            throw DomainError("quantile grid must be strictly ascending");
        }
        omega[j] += 0.5 * width;
        omega[j + 1] += 0.5 * width;
    }
    return omega;
}

} // namespace

CqfEstimate debiased_cqf(const Eigen::Ref<const Vector>& z, const QrFit& pilot, const DebiasWeights& weights,
                         const DualSolution& dual, const Eigen::Ref<const Vector>& densities,
                         const Eigen::Ref<const Vector>& responses, const Eigen::Ref<const Matrix>& group_design,
                         double tau, double n_total, int group) {
    require_tau(tau);
    const Index n_d = group_design.rows();
    const Index p = group_design.cols();
    if (z.size() != p || pilot.theta.size() != p || dual.v.size() != p) {
        throw InputError("debiased CQF: coefficient, dual or z length does not match design columns");
    }
    if (weights.w.size() != n_d || densities.size() != n_d || responses.size() != n_d) {
        throw InputError("debiased CQF: weights, densities or responses do not match group rows");
    }
    const Vector fitted = group_design * pilot.theta;
    Vector rank_score(n_d);
    for (Index i = 0; i < n_d; ++i) {
        rank_score[i] = tau - (responses[i] <= fitted[i] ? 1.0 : 0.0);
    }
    CqfEstimate out;
    out.tau = tau;
    out.group = group;
    out.z = z;
    out.theta_pilot = pilot.theta;
    out.weights = weights;
    out.dual = dual;
    const double plug_in = z.dot(pilot.theta);
    out.q_hat = plug_in + weights.w.cwiseQuotient(densities).dot(rank_score) / std::sqrt(n_total);
    out.q_hat_dual =
        plug_in - densities.cwiseProduct(rank_score).dot(group_design * dual.v) / (2.0 * n_total);
    if (!std::isfinite(out.q_hat)) {
        throw InputError("debiased CQF is not finite at tau=" + tau_label(tau));
    }
    return out;
}

double hqte(const CqfEstimate& cqf1, const CqfEstimate& cqf0) {
    if (cqf1.tau != cqf0.tau) {
        throw DomainError("HQTE needs both arms at the same quantile level");
    }
    if (cqf1.z.size() != cqf0.z.size() || cqf1.z != cqf0.z) {
        throw DomainError("HQTE needs both arms at the same covariate vector z");
    }
    return cqf1.q_hat - cqf0.q_hat;
}

double variance_primal(const DebiasWeights& weights, const Eigen::Ref<const Vector>& densities, double tau) {
    require_tau(tau);
    if (weights.w.size() != densities.size()) {
        throw InputError("weights and densities differ in length");
    }
    return tau * (1.0 - tau) * weights.w.cwiseQuotient(densities).squaredNorm();
}

double variance_dual(const DualSolution& dual, const Eigen::Ref<const Vector>& densities,
                     const Eigen::Ref<const Matrix>& group_design, double tau, double n_total) {
    require_tau(tau);
    if (densities.size() != group_design.rows() || dual.v.size() != group_design.cols()) {
        throw InputError("variance: dimension mismatch");
    }
    return tau * (1.0 - tau) * densities.cwiseProduct(group_design * dual.v).squaredNorm() / (4.0 * n_total);
}

Matrix covariance_matrix(std::span<const DualSolution> duals, const DensityField& densities,
                         const Eigen::Ref<const Matrix>& group_design, std::span<const double> tau_grid,
                         double n_total) {
    const std::size_t m = tau_grid.size();
    if (duals.size() != m) {
        throw InputError("covariance needs one dual solution per grid point");
    }
    Matrix scores(group_design.rows(), static_cast<Index>(m));
    for (std::size_t j = 0; j < m; ++j) {
        if (!densities.contains(tau_grid[j])) {
            throw InputError("covariance: missing densities at tau=" + tau_label(tau_grid[j]));
        }
        const Vector& f = densities.slice(tau_grid[j]).values;
        if (f.size() != group_design.rows() || duals[j].v.size() != group_design.cols()) {
            throw InputError("covariance: dimension mismatch at tau=" + tau_label(tau_grid[j]));
        }
        scores.col(static_cast<Index>(j)) = f.cwiseProduct(group_design * duals[j].v);
    }
    Matrix h = scores.transpose() * scores / (4.0 * n_total);
    for (std::size_t j = 0; j < m; ++j) {
        for (std::size_t k = 0; k < m; ++k) {
            const double kernel = std::min(tau_grid[j], tau_grid[k]) - tau_grid[j] * tau_grid[k];
            h(static_cast<Index>(j), static_cast<Index>(k)) *= kernel;
        }
    }
    return (h + h.transpose()) / 2.0;
}

std::pair<double, double> pointwise_ci(double alpha_hat, double sigma2_total, double n_total, double level) {
    require_level(level);
    if (!(sigma2_total >= 0.0) || !(n_total > 0.0)) {
        throw DomainError("pointwise CI needs a nonnegative variance and a positive sample size");
    }
    const double half = normal_quantile(0.5 + level / 2.0) * std::sqrt(sigma2_total / n_total);
    return {alpha_hat - half, alpha_hat + half};
}

GaussianProcessDraws simulate_limit_process(const Eigen::Ref<const Matrix>& h1, const Eigen::Ref<const Matrix>& h0,
                                            std::span<const double> sigma2, int n_draws, std::uint64_t rng_seed) {
    const std::size_t m = sigma2.size();
    if (m == 0) {
        throw InputError("limit process needs at least one grid point");
    }
    if (n_draws < 1) {
        throw DomainError("limit process needs at least one draw");
    }
    require_square(h1, m, "H1");
    require_square(h0, m, "H0");
    GaussianProcessDraws out;
    out.sd.resize(static_cast<Index>(m));
    std::vector<Index> active;
    for (std::size_t j = 0; j < m; ++j) {
        if (!(sigma2[j] >= 0.0) || !std::isfinite(sigma2[j])) {
            throw DomainError("variances must be finite and nonnegative");
        }
        out.sd[static_cast<Index>(j)] = std::sqrt(sigma2[j]);
        if (sigma2[j] > 0.0) active.push_back(static_cast<Index>(j));
    }
    out.draws = Matrix::Zero(n_draws, static_cast<Index>(m));
    if (active.empty()) {
        return out;
    }
    const auto q = static_cast<Index>(active.size());
    const Matrix h = h1 + h0;
    Matrix corr(q, q);
    for (Index a = 0; a < q; ++a) {
        for (Index b = 0; b < q; ++b) {
            corr(a, b) = h(active[a], active[b]) / (out.sd[active[a]] * out.sd[active[b]]);
        }
    }
    corr = (corr + corr.transpose()) / 2.0;
    const double base = corr.trace() / static_cast<double>(q);
    double jitter = 1e-10 * base;
    Eigen::LLT<Matrix> llt;
    for (;;) {
        Matrix shifted = corr;
        shifted.diagonal().array() += jitter;
        llt.compute(shifted);
        if (llt.info() == Eigen::Success) break;
        jitter *= 10.0;
        if (jitter > 1e-4 * base * (1.0 + 1e-9)) {
            throw InputError("combined covariance is not positive semidefinite (factorization failed at jitter 1e-4)");
        }
    }
    out.jitter = jitter;
    const Matrix lower = llt.matrixL();

    Rng rng(rng_seed);
    Matrix xi(q, n_draws);
    for (int r = 0; r < n_draws; ++r) {
        for (Index a = 0; a < q; ++a) {
            xi(a, r) = rng.normal();
        }
    }
    const Matrix g = (lower * xi).transpose();
    for (Index a = 0; a < q; ++a) {
        out.draws.col(active[a]) = g.col(a);
    }
    return out;
}

UniformBand uniform_band(const Eigen::Ref<const Matrix>& h1, const Eigen::Ref<const Matrix>& h0,
                         std::span<const double> sigma2, std::span<const double> alpha_hat, double n_total,
                         double level, int n_draws, std::uint64_t rng_seed) {
    require_level(level);
    if (alpha_hat.size() != sigma2.size()) {
        throw InputError("band: estimate and variance grids differ in length");
    }
    const GaussianProcessDraws sim = simulate_limit_process(h1, h0, sigma2, n_draws, rng_seed);
    std::vector<double> sup(static_cast<std::size_t>(n_draws));
    for (int r = 0; r < n_draws; ++r) {
        sup[static_cast<std::size_t>(r)] = sim.draws.row(r).cwiseAbs().maxCoeff();
    }
    UniformBand band;
    band.kappa = empirical_quantile(sup, level);
    band.jitter = sim.jitter;
    const auto m = static_cast<Index>(sigma2.size());
    band.low.resize(m);
    band.high.resize(m);
    for (Index j = 0; j < m; ++j) {
        const double half = band.kappa * sim.sd[j] / std::sqrt(n_total);
        band.low[j] = alpha_hat[static_cast<std::size_t>(j)] - half;
        band.high[j] = alpha_hat[static_cast<std::size_t>(j)] + half;
    }
    return band;
}

IntegratedHqte integrated_hqte(std::span<const double> alpha_hat, const Eigen::Ref<const Matrix>& h1,
                               const Eigen::Ref<const Matrix>& h0, std::span<const double> tau_grid, double n_total,
                               double level, int n_draws, std::uint64_t rng_seed) {
    require_level(level);
    const std::size_t m = tau_grid.size();
    if (m < 2) {
        throw DomainError("integrated HQTE needs at least two grid points");
    }
    if (alpha_hat.size() != m) {
        throw InputError("integrated HQTE: estimate and grid differ in length");
    }
    require_square(h1, m, "H1");
    require_square(h0, m, "H0");
    const std::vector<double> omega = trapezoid_weights(tau_grid);
    std::vector<double> sigma2(m);
    for (std::size_t j = 0; j < m; ++j) {
        sigma2[j] = std::max(0.0, h1(static_cast<Index>(j), static_cast<Index>(j)) +
                                      h0(static_cast<Index>(j), static_cast<Index>(j)));
    }
    const GaussianProcessDraws sim = simulate_limit_process(h1, h0, sigma2, n_draws, rng_seed);
    Vector scaled(static_cast<Index>(m));
    for (std::size_t j = 0; j < m; ++j) {
        scaled[static_cast<Index>(j)] = omega[j] * sim.sd[static_cast<Index>(j)];
    }
    const Vector sums = sim.draws * scaled;
    std::vector<double> magnitude(static_cast<std::size_t>(n_draws));
    for (int r = 0; r < n_draws; ++r) {
        magnitude[static_cast<std::size_t>(r)] = std::abs(sums[r]);
    }
    IntegratedHqte out;
    for (std::size_t j = 0; j < m; ++j) {
        out.estimate += omega[j] * alpha_hat[j];
    }
    out.critical = empirical_quantile(magnitude, level);
    out.low = out.estimate - out.critical / std::sqrt(n_total);
    out.high = out.estimate + out.critical / std::sqrt(n_total);
    return out;
}

std::vector<double> default_tau_grid() {
    std::vector<double> grid(17);
    for (int j = 0; j < 17; ++j) {
        grid[static_cast<std::size_t>(j)] = 0.1 + 0.05 * j;
    }
    return grid;
}

GroupPenalty select_arm_penalty(const Eigen::Ref<const Matrix>& arm_design, std::span<const double> tau_grid,
                                const EstimateOptions& options, int arm) {
    if (arm != 0 && arm != 1) {
        throw DomainError("arm must be 0 or 1");
    }
    GroupPenalty penalty;
    penalty.weighted = options.weighted_penalty;
    if (options.weighted_penalty) {
        penalty.loadings = column_loadings(arm_design);
    }
    if (const auto& fixed = options.lambda[static_cast<std::size_t>(arm)]) {
        if (!(*fixed >= 0.0) || !std::isfinite(*fixed)) {
            throw DomainError("lambda override must be finite and nonnegative");
        }
        penalty.lambda = *fixed;
    } else {
        penalty.lambda = select_lambda(arm_design, tau_grid, options.lambda_sims, options.lambda_level,
                                       options.lambda_multiplier,
                                       derive_seed(options.seed, 101 + static_cast<std::uint64_t>(arm)));
    }
    return penalty;
}

namespace {

struct ArmOutput {
    ArmDiagnostics diagnostics;
    std::vector<CqfEstimate> cqf;
    std::vector<double> var_primal;
    std::vector<double> var_dual;
    Matrix h;
};

ArmOutput run_arm(const Dataset& data, int arm, const Eigen::Ref<const Vector>& z, std::span<const double> grid,
                  const EstimateOptions& options) {
    const std::vector<Index> rows = data.arm_rows(arm);
    const auto n_d = static_cast<Index>(rows.size());
    const double n_total = static_cast<double>(data.size());
    const std::string where = "arm " + std::to_string(arm);
    Matrix x(n_d, data.columns());
    Vector y(n_d);
    for (Index r = 0; r < n_d; ++r) {
        x.row(r) = data.x.row(rows[static_cast<std::size_t>(r)]);
        y[r] = data.y[rows[static_cast<std::size_t>(r)]];
    }
    const auto arm_stream = static_cast<std::uint64_t>(arm) + 1;

    ArmOutput out;
    ArmDiagnostics& diag = out.diagnostics;
    diag.n_rows = n_d;
    GroupPenalty penalty;
    try {
        penalty = select_arm_penalty(x, grid, options, arm);
    } catch (const Error& e) {
        throw InputError(where + ": " + e.what());
    }
    diag.lambda = penalty.lambda;
    GroupFitter fitter(x, y, penalty, options.qr);

    const std::size_t m = grid.size();
    diag.gamma.assign(m, 0.0);
    diag.pilot_support_size.assign(m, 0);
    diag.pilot_iterations.assign(m, 0);
    diag.dual_iterations.assign(m, 0);
    diag.floored_densities.assign(m, 0);
    diag.bandwidth.assign(m, 0.0);
    diag.q_hat.assign(m, 0.0);
    diag.sigma2.assign(m, 0.0);
    out.cqf.resize(m);
    out.var_primal.assign(m, 0.0);
    out.var_dual.assign(m, 0.0);
    std::vector<DensitySlice> slices(m);
    std::vector<DualSolution> duals(m);

    DensitySettings density_settings;
    density_settings.bandwidth = options.bandwidth;
    density_settings.n_total = data.size();

    parallel_for(m, options.threads, [&](std::size_t j) {
        const double tau = grid[j];
        try {
            const QrFit& pilot = fitter.penalized(tau);
            slices[j] = estimate_densities(fitter, tau, density_settings);
            const Vector& f = slices[j].values;
            double gamma = 0.0;
            if (options.gamma[static_cast<std::size_t>(arm)]) {
                gamma = *options.gamma[static_cast<std::size_t>(arm)];
            } else {
                const std::vector<double> gamma_grid =
                    options.gamma_grid.empty() ? default_gamma_grid(z, n_total) : options.gamma_grid;
                gamma = select_gamma(x, f, z, n_total, options.cv_folds, gamma_grid, options.gamma_rule,
                                     derive_seed(options.seed, 1000 * arm_stream + j));
            }
            const DebiasProblem problem{x, f, z, gamma, n_total};
            duals[j] = solve_dual(problem, options.dual);
            const DebiasWeights weights = recover_weights(duals[j], problem);
            out.cqf[j] = debiased_cqf(z, pilot, weights, duals[j], f, y, x, tau, n_total, arm);
            out.var_primal[j] = variance_primal(weights, f, tau);
            out.var_dual[j] = variance_dual(duals[j], f, x, tau, n_total);

            diag.gamma[j] = gamma;
            diag.pilot_support_size[j] = static_cast<Index>(pilot.support.size());
            diag.pilot_iterations[j] = pilot.iterations;
            diag.dual_iterations[j] = duals[j].iterations;
            diag.floored_densities[j] = slices[j].floored_count;
            diag.bandwidth[j] = slices[j].h;
            diag.q_hat[j] = out.cqf[j].q_hat;
            diag.sigma2[j] = out.var_primal[j];
        } catch (const ConvergenceError& e) {
            throw ConvergenceError(where + ", tau=" + tau_label(tau) + ": " + e.what(), e.iterations(),
                                   e.primal_residual(), e.dual_residual());
        } catch (const InfeasibleError& e) {
            throw InfeasibleError(where + ", tau=" + tau_label(tau) + ": " + e.what());
        } catch (const DomainError& e) {
            throw DomainError(where + ", tau=" + tau_label(tau) + ": " + e.what());
        } catch (const Error& e) {
            throw InputError(where + ", tau=" + tau_label(tau) + ": " + e.what());
        }
    });

    DensityField field;
    for (auto& slice : slices) {
        field.insert(std::move(slice));
    }
    out.h = covariance_matrix(duals, field, x, grid, n_total);
    return out;
}

} // namespace

HqteResult estimate_full(const Dataset& data, const Eigen::Ref<const Vector>& z, std::span<const double> tau_grid,
                         const EstimateOptions& options) {
    data.validate();
    if (z.size() != data.columns()) {
        throw InputError("z has length " + std::to_string(z.size()) + " but the design has " +
                         std::to_string(data.columns()) + " columns");
    }
    if (!z.allFinite()) {
        throw InputError("z contains non-finite values");
    }
    if (tau_grid.empty()) {
        throw DomainError("quantile grid is empty");
    }
    for (std::size_t j = 0; j < tau_grid.size(); ++j) {
        require_tau(tau_grid[j]);
        if (j > 0 && !(tau_grid[j] > tau_grid[j - 1])) {
            throw DomainError("quantile grid must be strictly ascending");
        }
    }
    require_level(options.level);
    for (int arm = 0; arm < 2; ++arm) {
        if (data.arm_rows(arm).empty()) {
            throw InputError("treatment arm " + std::to_string(arm) + " has no observations");
        }
    }

    HqteResult result;
    result.tau_grid.assign(tau_grid.begin(), tau_grid.end());
    result.z = z;
    result.n_total = static_cast<double>(data.size());
    result.level = options.level;

    std::array<ArmOutput, 2> arms;
    for (int arm = 1; arm >= 0; --arm) {
        arms[static_cast<std::size_t>(arm)] = run_arm(data, arm, z, tau_grid, options);
    }

    const std::size_t m = tau_grid.size();
    result.alpha_hat.resize(m);
    result.sigma2.resize(m);
    result.sigma2_dual.resize(m);
    result.ci_low.resize(m);
    result.ci_high.resize(m);
    for (std::size_t j = 0; j < m; ++j) {
        result.alpha_hat[j] = hqte(arms[1].cqf[j], arms[0].cqf[j]);
        result.sigma2[j] = arms[1].var_primal[j] + arms[0].var_primal[j];
        result.sigma2_dual[j] = arms[1].var_dual[j] + arms[0].var_dual[j];
        const auto [low, high] = pointwise_ci(result.alpha_hat[j], result.sigma2[j], result.n_total, options.level);
        result.ci_low[j] = low;
        result.ci_high[j] = high;
    }
    result.h1 = arms[1].h;
    result.h0 = arms[0].h;
    if (options.band) {
        result.band = uniform_band(result.h1, result.h0, result.sigma2, result.alpha_hat, result.n_total,
                                   options.level, options.band_draws, derive_seed(options.seed, 7));
    }
    if (options.integrate && m >= 2) {
        result.integrated = integrated_hqte(result.alpha_hat, result.h1, result.h0, tau_grid, result.n_total,
                                            options.level, options.band_draws, derive_seed(options.seed, 7));
    }
    for (int arm = 0; arm < 2; ++arm) {
        result.arms[static_cast<std::size_t>(arm)] = std::move(arms[static_cast<std::size_t>(arm)].diagnostics);
        result.cqf[static_cast<std::size_t>(arm)] = std::move(arms[static_cast<std::size_t>(arm)].cqf);
    }
    return result;
}

} // namespace rankscore
