#include "rankscore/cli.hpp"

#include "rankscore/dataset.hpp"
#include "rankscore/hqte_inference.hpp"
#include "rankscore/sim_bench.hpp"
#include "rankscore/stats.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <sstream>
#include <system_error>

namespace rankscore {

namespace {

using nlohmann::json;

class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

std::string one_line(std::string text) {
    std::replace(text.begin(), text.end(), '\n', ' ');
    std::replace(text.begin(), text.end(), '\r', ' ');
    while (!text.empty() && text.back() == ' ') text.pop_back();
    return text;
}

std::string trim(const std::string& s) {
    const auto begin = s.find_first_not_of(" \t\r");
    if (begin == std::string::npos) return "";
    const auto end = s.find_last_not_of(" \t\r");
    return s.substr(begin, end - begin + 1);
}

std::vector<double> parse_list(const std::string& text, const std::string& what) {
    std::string spaced = text;
    std::replace(spaced.begin(), spaced.end(), ',', ' ');
    std::istringstream in(spaced);
    std::vector<double> values;
    std::string token;
    while (in >> token) {
        double value = 0.0;
        const auto [ptr, ec] = std::from_chars(token.data(), token.data() + token.size(), value);
        if (ec != std::errc() || ptr != token.data() + token.size() || !std::isfinite(value)) {
            throw UsageError(what + ": '" + token + "' is not a number");
        }
        values.push_back(value);
    }
    if (values.empty()) {
        throw UsageError(what + " is empty");
    }
    return values;
}

std::vector<double> parse_tau(const std::string& text) {
    if (trim(text) == "default") {
        return default_tau_grid();
    }
    const std::vector<double> tau = parse_list(text, "--tau");
    for (std::size_t j = 0; j < tau.size(); ++j) {
        if (!(tau[j] > 0.0 && tau[j] < 1.0)) {
            throw UsageError("--tau values must lie in (0,1)");
        }
        if (j > 0 && !(tau[j] > tau[j - 1])) {
            throw UsageError("--tau values must be strictly ascending");
        }
    }
    return tau;
}

void write_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw InputError("cannot write " + path);
    }
    out << text;
    if (!out) {
        throw InputError("failed writing " + path);
    }
}

std::string fmt17(double value) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", value);
    return buf;
}

json vector_json(const Vector& v) { return json(std::vector<double>(v.data(), v.data() + v.size())); }

json matrix_json(const Matrix& m) {
    json rows = json::array();
    for (Index i = 0; i < m.rows(); ++i) {
        rows.push_back(vector_json(m.row(i).transpose()));
    }
    return rows;
}

void require_finite(const json& node, const std::string& where) {
    if (node.is_number_float() && !std::isfinite(node.get<double>())) {
        throw Error("non-finite value in output field " + where);
    }
    if (node.is_array()) {
        for (std::size_t i = 0; i < node.size(); ++i) require_finite(node[i], where);
    } else if (node.is_object()) {
        for (auto it = node.begin(); it != node.end(); ++it) require_finite(it.value(), it.key());
    }
}

std::string json_text(const json& doc) {
    require_finite(doc, "result");
    return doc.dump(2) + "\n";
}

json read_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw InputError("cannot open " + path);
    }
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw InputError(path + ": " + e.what());
    }
}

Matrix matrix_from_json(const json& node, const std::string& name) {
    if (!node.is_array()) {
        throw InputError("field '" + name + "' must be a matrix");
    }
    const auto m = static_cast<Index>(node.size());
    Matrix out(m, m);
    for (Index i = 0; i < m; ++i) {
        const std::vector<double> row = node[static_cast<std::size_t>(i)].get<std::vector<double>>();
        if (static_cast<Index>(row.size()) != m) {
            throw InputError("field '" + name + "' must be square");
        }
        for (Index j = 0; j < m; ++j) out(i, j) = row[static_cast<std::size_t>(j)];
    }
    return out;
}

struct Common {
    std::string config;
    int threads = 0; // 0: take RANKSCORE_THREADS, else 1
    std::uint64_t seed = 1;
};

void add_common(CLI::App* app, Common& common) {
    app->add_option("--config", common.config, "Flat key=value file; command line flags override it");
    app->add_option("--threads", common.threads, "Worker threads (default: $RANKSCORE_THREADS, else 1)")
        ->check(CLI::PositiveNumber);
    app->add_option("--seed", common.seed, "Random seed");
}

struct Tuning {
    bool no_intercept = false;
    std::optional<double> lambda0;
    std::optional<double> lambda1;
    std::optional<double> gamma0;
    std::optional<double> gamma1;
    int lambda_sims = 1000;
    double lambda_level = 0.9;
    double lambda_multiplier = 1.5;
    bool unweighted = false;
    std::optional<double> bandwidth;
    int folds = 10;
    std::string gamma_rule = "one_se";
    double level = 0.95;
};

void add_tuning(CLI::App* app, Tuning& t) {
    app->add_option("--lambda0", t.lambda0, "Penalty level for arm 0 (default: simulated rule)");
    app->add_option("--lambda1", t.lambda1, "Penalty level for arm 1 (default: simulated rule)");
    app->add_option("--gamma0", t.gamma0, "Debiasing level for arm 0 (default: cross-validated)");
    app->add_option("--gamma1", t.gamma1, "Debiasing level for arm 1 (default: cross-validated)");
    app->add_option("--lambda-sims", t.lambda_sims, "Replicates for the simulated penalty")->check(CLI::PositiveNumber);
    app->add_option("--lambda-level", t.lambda_level, "Quantile of the simulated statistic")
        ->check(CLI::Range(0.0, 1.0));
    app->add_option("--lambda-multiplier", t.lambda_multiplier, "Multiplier on the simulated quantile")
        ->check(CLI::PositiveNumber);
    app->add_flag("--unweighted", t.unweighted, "Plain l1 penalty instead of column loadings");
    app->add_option("--bandwidth", t.bandwidth, "Fixed density bandwidth (default: rule)")->check(CLI::PositiveNumber);
    app->add_option("--folds", t.folds, "Cross-validation folds")->check(CLI::Range(2, 1000000));
    app->add_option("--gamma-rule", t.gamma_rule, "one_se, two_se or min");
    app->add_option("--level", t.level, "Confidence level")->check(CLI::Range(0.0, 1.0));
    app->add_flag("--no-intercept", t.no_intercept, "Do not prepend an intercept column");
}

EstimateOptions make_options(const Tuning& t, const Common& common) {
    EstimateOptions options;
    options.weighted_penalty = !t.unweighted;
    options.lambda = {t.lambda0, t.lambda1};
    options.gamma = {t.gamma0, t.gamma1};
    options.lambda_sims = t.lambda_sims;
    options.lambda_level = t.lambda_level;
    options.lambda_multiplier = t.lambda_multiplier;
    options.bandwidth = t.bandwidth;
    options.cv_folds = t.folds;
    try {
        options.gamma_rule = parse_gamma_rule(t.gamma_rule);
    } catch (const Error& e) {
        throw UsageError(std::string("--gamma-rule: ") + e.what());
    }
    if (!(t.level > 0.0 && t.level < 1.0)) {
        throw UsageError("--level must lie in (0,1)");
    }
    options.level = t.level;
    options.seed = common.seed;
    options.threads = common.threads;
    return options;
}

struct Inputs {
    std::string data;
    std::string z_file;
    std::string z_values;
    std::string tau = "0.5";
};

void add_inputs(CLI::App* app, Inputs& in) {
    app->add_option("--data", in.data, "CSV with header y,d,x1,...,xp")->required()->check(CLI::ExistingFile);
    auto* zf = app->add_option("--z", in.z_file, "File with the covariate vector z")->check(CLI::ExistingFile);
    auto* zv = app->add_option("--z-values", in.z_values, "Inline comma-separated z");
    zf->excludes(zv);
    app->add_option("--tau", in.tau, "Comma-separated quantile levels, or 'default' for 0.1,0.15,...,0.9");
}

struct Loaded {
    Dataset data;
    Vector z;
    std::vector<double> tau;
};

Loaded load_inputs(const Inputs& in, const Tuning& t) {
    if (in.z_file.empty() && in.z_values.empty()) {
        throw UsageError("one of --z or --z-values is required");
    }
    Loaded out;
    out.tau = parse_tau(in.tau);
    CsvOptions csv;
    csv.add_intercept = !t.no_intercept;
    out.data = load_csv(in.data, csv);
    Vector z;
    if (!in.z_file.empty()) {
        z = load_vector(in.z_file);
    } else {
        const std::vector<double> values = parse_list(in.z_values, "--z-values");
        z = Eigen::Map<const Vector>(values.data(), static_cast<Index>(values.size()));
    }
    const Index p = out.data.columns();
    if (z.size() == p) {
        out.z = z;
    } else if (csv.add_intercept && z.size() == p - 1) {
        out.z.resize(p);
        out.z[0] = 1.0;
        out.z.tail(p - 1) = z;
    } else {
        throw UsageError("z has " + std::to_string(z.size()) + " entries; expected " + std::to_string(p) +
                         (csv.add_intercept ? " or " + std::to_string(p - 1) + " (intercept prepended)" : ""));
    }
    return out;
}

json arm_json(const ArmDiagnostics& arm, int index) {
    return json{{"arm", index},
                {"n", arm.n_rows},
                {"lambda", arm.lambda},
                {"gamma", arm.gamma},
                {"pilot_support_size", arm.pilot_support_size},
                {"pilot_iterations", arm.pilot_iterations},
                {"dual_iterations", arm.dual_iterations},
                {"floored_densities", arm.floored_densities},
                {"bandwidth", arm.bandwidth},
                {"q_hat", arm.q_hat},
                {"sigma2", arm.sigma2}};
}

std::string plot_csv(const std::vector<double>& tau, const std::vector<double>& alpha,
                     const std::vector<double>& low, const std::vector<double>& high, const UniformBand* band) {
    std::string text = "tau,alpha_hat,ci_low,ci_high,band_low,band_high\n";
    for (std::size_t j = 0; j < tau.size(); ++j) {
        text += fmt17(tau[j]) + "," + fmt17(alpha[j]) + "," + fmt17(low[j]) + "," + fmt17(high[j]) + ",";
        if (band) {
            text += fmt17(band->low[static_cast<Index>(j)]) + "," + fmt17(band->high[static_cast<Index>(j)]);
        } else {
            text += ",";
        }
        text += "\n";
    }
    return text;
}

std::string csv_path_for(const std::string& out, const std::string& csv) {
    if (!csv.empty()) return csv;
    std::filesystem::path path(out);
    if (path.extension() == ".csv") {
        path.replace_extension(".plot.csv");
    } else {
        path.replace_extension(".csv");
    }
    return path.string();
}

int cmd_estimate(const Inputs& in, const Tuning& t, const Common& common, const std::string& out_path,
                 const std::string& csv_path, bool no_band, int band_draws, std::ostream& out) {
    const Loaded loaded = load_inputs(in, t);
    EstimateOptions options = make_options(t, common);
    options.band = !no_band;
    options.integrate = loaded.tau.size() >= 2;
    options.band_draws = band_draws;
    const HqteResult r = estimate_full(loaded.data, loaded.z, loaded.tau, options);

    json doc;
    doc["tau"] = r.tau_grid;
    doc["alpha_hat"] = r.alpha_hat;
    doc["sigma2"] = r.sigma2;
    doc["sigma2_dual"] = r.sigma2_dual;
    doc["ci_low"] = r.ci_low;
    doc["ci_high"] = r.ci_high;
    doc["level"] = r.level;
    doc["n"] = static_cast<Index>(r.n_total);
    doc["z"] = vector_json(r.z);
    doc["h1"] = matrix_json(r.h1);
    doc["h0"] = matrix_json(r.h0);
    doc["band"] = r.band ? json{{"kappa", r.band->kappa},
                                {"low", vector_json(r.band->low)},
                                {"high", vector_json(r.band->high)},
                                {"jitter", r.band->jitter},
                                {"draws", band_draws}}
                         : json(nullptr);
    doc["integrated"] = r.integrated ? json{{"estimate", r.integrated->estimate},
                                            {"low", r.integrated->low},
                                            {"high", r.integrated->high},
                                            {"critical", r.integrated->critical}}
                                     : json(nullptr);
    doc["arms"] = json::array({arm_json(r.arms[0], 0), arm_json(r.arms[1], 1)});
    doc["settings"] = json{{"seed", common.seed},
                           {"folds", options.cv_folds},
                           {"gamma_rule", to_string(options.gamma_rule)},
                           {"lambda_sims", options.lambda_sims},
                           {"lambda_level", options.lambda_level},
                           {"lambda_multiplier", options.lambda_multiplier},
                           {"weighted_penalty", options.weighted_penalty},
                           {"intercept", !t.no_intercept}};
    write_file(out_path, json_text(doc));
    const std::string plot = csv_path_for(out_path, csv_path);
    write_file(plot, plot_csv(r.tau_grid, r.alpha_hat, r.ci_low, r.ci_high, r.band ? &*r.band : nullptr));
    out << "wrote " << out_path << " and " << plot << "\n";
    return 0;
}

int cmd_tune(const Inputs& in, const Tuning& t, const Common& common, const std::string& out_path,
             std::ostream& out) {
    const Loaded loaded = load_inputs(in, t);
    const EstimateOptions options = make_options(t, common);
    const Dataset& data = loaded.data;
    data.validate();
    const double n_total = static_cast<double>(data.size());
    json arms = json::array();
    out << "arm  tau       lambda          gamma\n";
    for (int arm = 0; arm < 2; ++arm) {
        const std::vector<Index> rows = data.arm_rows(arm);
        if (rows.empty()) {
            throw InputError("treatment arm " + std::to_string(arm) + " has no observations");
        }
        Matrix x(static_cast<Index>(rows.size()), data.columns());
        Vector y(static_cast<Index>(rows.size()));
        for (std::size_t r = 0; r < rows.size(); ++r) {
            x.row(static_cast<Index>(r)) = data.x.row(rows[r]);
            y[static_cast<Index>(r)] = data.y[rows[r]];
        }
        GroupFitter fitter(x, y, select_arm_penalty(x, loaded.tau, options, arm), options.qr);
        DensitySettings density;
        density.bandwidth = options.bandwidth;
        density.n_total = data.size();
        json levels = json::array();
        for (std::size_t j = 0; j < loaded.tau.size(); ++j) {
            const double tau = loaded.tau[j];
            const DensitySlice slice = estimate_densities(fitter, tau, density);
            json level{{"tau", tau},
                       {"pilot_support", fitter.penalized(tau).support},
                       {"floored_densities", slice.floored_count}};
            double gamma = 0.0;
            if (const auto& fixed = options.gamma[static_cast<std::size_t>(arm)]) {
                gamma = *fixed;
                level["cv"] = nullptr;
            } else {
                const std::vector<double> grid = default_gamma_grid(loaded.z, n_total);
                // Same seed stream as estimate_full, so the selected values agree.
                const GammaCv cv = cross_validate_gamma(
                    x, slice.values, loaded.z, n_total, options.cv_folds, grid, options.gamma_rule,
                    derive_seed(options.seed, 1000 * (static_cast<std::uint64_t>(arm) + 1) + j), options.dual,
                    options.threads);
                json risk = json::array();
                for (double value : cv.mean_risk) risk.push_back(std::isfinite(value) ? json(value) : json(nullptr));
                level["cv"] = json{{"gamma_grid", cv.grid},
                                   {"mean_risk", risk},
                                   {"se_risk", cv.se_risk},
                                   {"failed_folds", cv.failed_folds},
                                   {"best_index", cv.best_index},
                                   {"selected_index", cv.selected_index}};
                gamma = cv.selected;
            }
            level["gamma"] = gamma;
            char line[128];
            std::snprintf(line, sizeof line, "%-4d %-9.4g %-15.8g %.8g\n", arm, tau, fitter.penalty().lambda, gamma);
            out << line;
            levels.push_back(level);
        }
        arms.push_back(json{{"arm", arm}, {"n", x.rows()}, {"lambda", fitter.penalty().lambda}, {"levels", levels}});
    }
    json doc{{"tau", loaded.tau}, {"gamma_rule", to_string(options.gamma_rule)}, {"arms", arms}};
    write_file(out_path, json_text(doc));
    return 0;
}

int cmd_band(const std::string& estimate_path, std::optional<double> level_flag, int draws, const Common& common,
             const std::string& out_path, const std::string& csv_path, std::ostream& out) {
    const json doc = read_json(estimate_path);
    std::vector<double> tau;
    std::vector<double> alpha;
    std::vector<double> sigma2;
    std::vector<double> ci_low;
    std::vector<double> ci_high;
    double n_total = 0.0;
    double level = 0.95;
    Matrix h1;
    Matrix h0;
    try {
        tau = doc.at("tau").get<std::vector<double>>();
        alpha = doc.at("alpha_hat").get<std::vector<double>>();
        sigma2 = doc.at("sigma2").get<std::vector<double>>();
        ci_low = doc.at("ci_low").get<std::vector<double>>();
        ci_high = doc.at("ci_high").get<std::vector<double>>();
        n_total = doc.at("n").get<double>();
        level = doc.at("level").get<double>();
        h1 = matrix_from_json(doc.at("h1"), "h1");
        h0 = matrix_from_json(doc.at("h0"), "h0");
    } catch (const json::exception& e) {
        throw InputError(estimate_path + ": not an estimate result (" + e.what() + ")");
    }
    if (level_flag) {
        level = *level_flag;
    }
    const UniformBand band = uniform_band(h1, h0, sigma2, alpha, n_total, level, draws, common.seed);
    json result{{"tau", tau},
                {"level", level},
                {"kappa", band.kappa},
                {"low", vector_json(band.low)},
                {"high", vector_json(band.high)},
                {"jitter", band.jitter},
                {"draws", draws},
                {"seed", common.seed}};
    write_file(out_path, json_text(result));
    if (!csv_path.empty()) {
        write_file(csv_path, plot_csv(tau, alpha, ci_low, ci_high, &band));
    }
    char line[64];
    std::snprintf(line, sizeof line, "kappa %.6f\n", band.kappa);
    out << line;
    return 0;
}

struct SimArgs {
    std::string design = "homo-sparse";
    Index n = 600;
    Index p = 100;
    int reps = 100;
    double theta_norm = 1.0;
    std::string z_shape = "sparse";
    std::string tau = "0.5";
    std::string estimators = "rank_1se,oracle,refit,lasso";
    std::string out;
    std::string csv;
};

std::string metrics_table(const McMetrics& m) {
    std::string text;
    char line[256];
    std::snprintf(line, sizeof line, "design %s n %ld p %ld replications %d failures %d\n",
                  design_name(m.design).c_str(), static_cast<long>(m.design.n), static_cast<long>(m.design.p),
                  m.attempted, m.failures);
    text += line;
    text += "estimator  tau    truth      sqrt_n_bias        n_var              coverage       std_mean  std_var\n";
    for (const McRow& r : m.rows) {
        std::snprintf(line, sizeof line, "%-10s %-6.3g %-10.4f %7.3f (%5.3f)    %7.3f (%6.3f)   %5.3f (%5.3f)  %8.3f  %7.3f\n",
                      to_string(r.estimator).c_str(), r.tau, r.truth, r.sqrt_n_bias, r.sqrt_n_bias_se, r.n_variance,
                      r.n_variance_se, r.coverage, r.coverage_se, r.standardized_mean, r.standardized_variance);
        text += line;
    }
    return text;
}

int cmd_simulate(const SimArgs& s, const Tuning& t, const Common& common, std::ostream& out) {
    SimDesign design;
    try {
        design = parse_design(s.design);
    } catch (const DomainError& e) {
        throw UsageError(std::string("--design: ") + e.what());
    }
    design.n = s.n;
    design.p = s.p;
    design.theta1_norm = s.theta_norm;
    if (s.z_shape == "sparse") {
        design.z_shape = ZShape::sparse;
    } else if (s.z_shape == "dense") {
        design.z_shape = ZShape::dense;
    } else {
        throw UsageError("--z-shape must be sparse or dense");
    }
    try {
        design.validate();
    } catch (const DomainError& e) {
        throw UsageError(e.what());
    }
    McOptions mc;
    mc.tau_list = parse_tau(s.tau);
    mc.n_reps = s.reps;
    mc.seed = common.seed;
    mc.threads = common.threads;
    mc.estimate = make_options(t, common);
    mc.estimators.clear();
    std::string names = s.estimators;
    std::replace(names.begin(), names.end(), ',', ' ');
    std::istringstream tokens(names);
    std::string name;
    while (tokens >> name) {
        try {
            mc.estimators.push_back(parse_estimator(name));
        } catch (const DomainError& e) {
            throw UsageError(std::string("--estimators: ") + e.what());
        }
    }
    if (mc.estimators.empty()) {
        throw UsageError("--estimators is empty");
    }
    const McMetrics metrics = run_monte_carlo(design, mc);
    const std::string table = metrics_table(metrics);
    out << table;
    if (!s.out.empty()) {
        json rows = json::array();
        for (const McRow& r : metrics.rows) {
            rows.push_back(json{{"estimator", to_string(r.estimator)},
                                {"tau", r.tau},
                                {"truth", r.truth},
                                {"replications", r.replications},
                                {"sqrt_n_bias", r.sqrt_n_bias},
                                {"sqrt_n_bias_se", r.sqrt_n_bias_se},
                                {"n_variance", r.n_variance},
                                {"n_variance_se", r.n_variance_se},
                                {"coverage", r.coverage},
                                {"coverage_se", r.coverage_se},
                                {"mean_ci_length", r.mean_ci_length},
                                {"standardized_mean", r.standardized_mean},
                                {"standardized_variance", r.standardized_variance}});
        }
        json doc{{"design", design_name(design)},
                 {"n", design.n},
                 {"p", design.p},
                 {"theta1_norm", design.theta1_norm},
                 {"z_shape", s.z_shape},
                 {"seed", common.seed},
                 {"attempted", metrics.attempted},
                 {"failures", metrics.failures},
                 {"rows", rows}};
        write_file(s.out, json_text(doc));
    }
    if (!s.csv.empty()) {
        std::string text = "estimator,tau,truth,replications,sqrt_n_bias,sqrt_n_bias_se,n_variance,n_variance_se,"
                           "coverage,coverage_se,mean_ci_length,standardized_mean,standardized_variance\n";
        for (const McRow& r : metrics.rows) {
            text += to_string(r.estimator) + "," + fmt17(r.tau) + "," + fmt17(r.truth) + "," +
                    std::to_string(r.replications) + "," + fmt17(r.sqrt_n_bias) + "," + fmt17(r.sqrt_n_bias_se) +
                    "," + fmt17(r.n_variance) + "," + fmt17(r.n_variance_se) + "," + fmt17(r.coverage) + "," +
                    fmt17(r.coverage_se) + "," + fmt17(r.mean_ci_length) + "," + fmt17(r.standardized_mean) + "," +
                    fmt17(r.standardized_variance) + "\n";
        }
        write_file(s.csv, text);
    }
    return 0;
}

// Splices config tokens in right after the subcommand, so later command line flags take precedence.
std::vector<std::string> expand_config(const std::vector<std::string>& args) {
    std::vector<std::string> out = args;
    for (std::size_t i = 1; i < args.size(); ++i) {
        std::string path;
        if (args[i] == "--config" && i + 1 < args.size()) {
            path = args[i + 1];
        } else if (args[i].rfind("--config=", 0) == 0) {
            path = args[i].substr(9);
        } else {
            continue;
        }
        const std::vector<std::string> tokens = config_tokens(path);
        out.insert(out.begin() + 1, tokens.begin(), tokens.end());
        break;
    }
    return out;
}

json error_line(const std::string& kind, const std::string& message) {
    return json{{"error", kind}, {"message", one_line(message)}};
}

} // namespace

std::vector<std::string> config_tokens(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw UsageError("cannot open config file " + path);
    }
    std::vector<std::string> tokens;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const std::string text = trim(line);
        if (text.empty() || text[0] == '#') continue;
        const auto eq = text.find('=');
        if (eq == std::string::npos || trim(text.substr(0, eq)).empty()) {
            throw UsageError(path + ":" + std::to_string(line_no) + ": expected key=value");
        }
        std::string key = trim(text.substr(0, eq));
        if (key.rfind("--", 0) == 0) key = key.substr(2);
        if (key == "config") {
            throw UsageError(path + ":" + std::to_string(line_no) + ": nested config files are not supported");
        }
        tokens.push_back("--" + key + "=" + trim(text.substr(eq + 1)));
    }
    return tokens;
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Rank-score debiased heterogeneous quantile treatment effects", "rankscore"};
    app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    app.require_subcommand(1, 1);

    Common common;
    Inputs inputs;
    Tuning tuning;
    std::string out_path;
    std::string csv_path;
    bool no_band = false;
    int band_draws = 10000;
    std::string estimate_path;
    std::optional<double> band_level;
    SimArgs sim;

    auto* estimate = app.add_subcommand("estimate", "Estimate the HQTE with pointwise intervals, band and integral");
    add_common(estimate, common);
    add_inputs(estimate, inputs);
    add_tuning(estimate, tuning);
    estimate->add_option("--out", out_path, "JSON result path")->required();
    estimate->add_option("--csv", csv_path, "Plot data path (default: --out with a .csv extension)");
    estimate->add_flag("--no-band", no_band, "Skip the uniform band");
    estimate->add_option("--band-draws", band_draws, "Draws for the band and integral")->check(CLI::PositiveNumber);

    auto* tune = app.add_subcommand("tune", "Report the selected penalty and debiasing levels with CV curves");
    add_common(tune, common);
    add_inputs(tune, inputs);
    add_tuning(tune, tuning);
    tune->add_option("--out", out_path, "JSON report path")->required();

    auto* band = app.add_subcommand("band", "Uniform band from a saved estimate");
    add_common(band, common);
    band->add_option("--estimate", estimate_path, "JSON written by estimate")->required()->check(CLI::ExistingFile);
    band->add_option("--level", band_level, "Band level (default: the estimate's level)")->check(CLI::Range(0.0, 1.0));
    band->add_option("--draws", band_draws, "Simulation draws")->check(CLI::PositiveNumber);
    band->add_option("--out", out_path, "JSON band path")->required();
    band->add_option("--csv", csv_path, "Optional plot data path");

    auto* simulate = app.add_subcommand("simulate", "Monte Carlo study on the simulation design");
    add_common(simulate, common);
    add_tuning(simulate, tuning);
    simulate->add_option("--design", sim.design, "homo|hetero - sparse|pseudo-dense|dense");
    simulate->add_option("--n", sim.n, "Sample size")->check(CLI::PositiveNumber);
    simulate->add_option("--p", sim.p, "Columns including the intercept")->check(CLI::PositiveNumber);
    simulate->add_option("--reps", sim.reps, "Replications")->check(CLI::PositiveNumber);
    simulate->add_option("--theta-norm", sim.theta_norm, "Euclidean norm of theta1")->check(CLI::PositiveNumber);
    simulate->add_option("--z-shape", sim.z_shape, "sparse or dense");
    simulate->add_option("--tau", sim.tau, "Comma-separated quantile levels");
    simulate->add_option("--estimators", sim.estimators, "Comma-separated: rank_1se,rank_2se,oracle,refit,lasso");
    simulate->add_option("--out", sim.out, "JSON metrics path");
    simulate->add_option("--csv", sim.csv, "CSV metrics path");

    try {
        std::vector<std::string> expanded = expand_config(args);
        std::reverse(expanded.begin(), expanded.end());
        try {
            app.parse(expanded);
        } catch (const CLI::CallForHelp&) {
            out << app.help();
            return 0;
        } catch (const CLI::CallForAllHelp&) {
            out << app.help("", CLI::AppFormatMode::All);
            return 0;
        } catch (const CLI::ParseError& e) {
            err << error_line("usage", e.what()).dump() << "\n";
            return 2;
        }
        // CLI11 silently drops environment values that fail validation, so this is read by hand.
        if (common.threads == 0) {
            common.threads = 1;
            if (const char* env = std::getenv("RANKSCORE_THREADS"); env && *env) {
                const std::string text = trim(env);
                const auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), common.threads);
                if (ec != std::errc{} || end != text.data() + text.size() || common.threads < 1) {
                    throw UsageError("RANKSCORE_THREADS must be a positive integer, found '" + std::string(env) + "'");
                }
            }
        }
        if (estimate->parsed()) {
            return cmd_estimate(inputs, tuning, common, out_path, csv_path, no_band, band_draws, out);
        }
        if (tune->parsed()) {
            return cmd_tune(inputs, tuning, common, out_path, out);
        }
        if (band->parsed()) {
            return cmd_band(estimate_path, band_level, band_draws, common, out_path, csv_path, out);
        }
        return cmd_simulate(sim, tuning, common, out);
    } catch (const UsageError& e) {
        err << error_line("usage", e.what()).dump() << "\n";
        return 2;
    } catch (const ConvergenceError& e) {
        err << error_line("convergence", e.what()).dump() << "\n";
    } catch (const InfeasibleError& e) {
        err << error_line("infeasible", e.what()).dump() << "\n";
    } catch (const DomainError& e) {
        err << error_line("domain", e.what()).dump() << "\n";
    } catch (const InputError& e) {
        err << error_line("input", e.what()).dump() << "\n";
    } catch (const std::exception& e) {
        err << error_line("runtime", e.what()).dump() << "\n";
    }
    return 1;
}

} // namespace rankscore
