#include <doctest.h>

#include "rankscore/sim_bench.hpp"
#include "rankscore/stats.hpp"

#include <cmath>
#include <vector>

using namespace rankscore;

TEST_CASE("propensity") {
    Vector x = Vector::Zero(10);
    x[0] = 1.0;
    CHECK(propensity(x) == doctest::Approx(0.7310585786).epsilon(1e-10));
    x[6] = 1.0;
    CHECK(propensity(x) == doctest::Approx(0.5).epsilon(1e-14));
    x[7] = 2.0;
    CHECK(propensity(x) == doctest::Approx(1.0 / (1.0 + std::exp(-2.0))).epsilon(1e-14));
    CHECK_THROWS_AS(propensity(Vector::Zero(5)), InputError);
}

TEST_CASE("covariates follow the AR(0.5) covariance") {
    SimDesign design;
    design.n = 100000;
    design.p = 9;
    Rng rng(4);
    const Dataset data = generate_dataset(design, rng);
    CHECK((data.x.col(0).array() == 1.0).all());
    const Matrix w = data.x.rightCols(8);
    const Vector mu = w.colwise().mean();
    const Matrix centered = w.rowwise() - mu.transpose();
    const Matrix cov = centered.transpose() * centered / static_cast<double>(design.n - 1);
    for (Index j = 0; j < 8; ++j) {
        for (Index k = 0; k < 8; ++k) {
            CHECK(std::abs(cov(j, k) - std::pow(0.5, std::abs(static_cast<double>(j - k)))) <= 0.02);
        }
    }
    CHECK(cov(0, 2) == doctest::Approx(0.25).epsilon(0.08));
    // Treatment share matches the mean propensity.
    double expected = 0.0;
    for (Index i = 0; i < design.n; ++i) expected += propensity(data.x.row(i).transpose());
    CHECK(std::abs(static_cast<double>(data.arm_rows(1).size()) - expected) / static_cast<double>(design.n) <= 0.01);
}

TEST_CASE("heteroscedastic covariate transforms") {
    SimDesign design = parse_design("hetero-sparse");
    design.n = 2000;
    design.p = 10;
    Rng rng(5);
    const Dataset data = generate_dataset(design, rng);
    CHECK(data.x.col(1).minCoeff() >= 0.1);
    CHECK(data.x.col(2).minCoeff() >= 0.5);
    CHECK(std::abs(data.x.col(2).mean() - 1.5) <= 0.1);
}

TEST_CASE("theta1 shapes and norms") {
    for (const char* name : {"homo-sparse", "homo-pseudo-dense", "homo-dense"}) {
        for (double norm : {1.0, 2.0, 4.0}) {
            SimDesign design = parse_design(name);
            design.p = 50;
            design.theta1_norm = norm;
            const Vector theta = true_theta1(design);
            CHECK(theta.norm() == doctest::Approx(norm).epsilon(1e-13));
            CHECK(theta[0] > theta[9] * 0.999);
        }
    }
    SimDesign sparse;
    sparse.p = 20;
    const Vector theta = true_theta1(sparse);
    CHECK(theta.head(6).isApproxToConstant(1.0 / std::sqrt(6.0), 1e-14));
    CHECK(theta.tail(14).isZero());
    SimDesign dense = parse_design("homo-dense");
    dense.p = 20;
    const Vector td = true_theta1(dense);
    CHECK(td[3] / td[0] == doctest::Approx(0.5).epsilon(1e-14));
    SimDesign pseudo = parse_design("homo-pseudo-dense");
    pseudo.p = 20;
    const Vector tp = true_theta1(pseudo);
    CHECK(tp[3] / tp[0] == doctest::Approx(0.25).epsilon(1e-14));
}

TEST_CASE("z vectors and supports") {
    SimDesign design;
    design.p = 12;
    const Vector z = design_z(design);
    CHECK(z[1] == doctest::Approx(std::sqrt(0.5)));
    CHECK(z[2] == doctest::Approx(std::sqrt(0.5)));
    CHECK(z.norm() == doctest::Approx(1.0));
    design.z_shape = ZShape::dense;
    const Vector zd = design_z(design);
    CHECK(zd[0] == 1.0);
    CHECK(zd[1] == 1.0);
    CHECK(zd[11] == doctest::Approx(1.0 / std::sqrt(11.0)));

    SimDesign homo;
    homo.p = 12;
    CHECK(true_support(homo, 0) == Support{0, 2, 3});
    CHECK(true_support(homo, 1) == Support{0, 1, 2, 3, 4, 5});
    SimDesign hetero = parse_design("hetero-sparse");
    hetero.p = 12;
    CHECK(true_support(hetero, 0) == Support{0, 1, 2, 3});
}

TEST_CASE("analytic truth matches brute-force conditional quantiles") {
    const int draws = 1000000;
    Rng rng(8);
    std::vector<double> eps(draws);
    for (double& e : eps) e = rng.normal();
    for (const char* name : {"homo-sparse", "hetero-sparse"}) {
        SimDesign design = parse_design(name);
        design.p = 12;
        Vector x = Vector::Zero(12);
        x << 1.0, 0.8, 1.3, -0.4, 0.2, 1.1, -0.7, 0.3, 0.0, 0.5, -1.2, 0.9;
        for (int arm = 0; arm < 2; ++arm) {
            const Vector theta = arm == 1 ? true_theta1(design) : true_theta0(design.p);
            const double scale = design.noise == Noise::homoscedastic ? 1.0 : (arm == 1 ? x[2] : x[1]);
            std::vector<double> y(draws);
            for (int r = 0; r < draws; ++r) y[static_cast<std::size_t>(r)] = x.dot(theta) + scale * eps[static_cast<std::size_t>(r)];
            for (double tau : {0.2, 0.5, 0.85}) {
                const double brute = empirical_quantile(y, tau);
                const double analytic = x.dot(true_quantile_coefficients(design, arm, tau));
                CHECK(std::abs(brute - analytic) <= 0.01);
            }
        }
    }
    SimDesign homo;
    homo.p = 12;
    const Vector z = design_z(homo);
    const double shift_free = z.dot(true_theta1(homo) - true_theta0(12));
    CHECK(true_alpha(homo, 0.2) == doctest::Approx(shift_free).epsilon(1e-14));
    CHECK(true_alpha(homo, 0.8) == doctest::Approx(shift_free).epsilon(1e-14));
}

TEST_CASE("design and estimator names") {
    for (const char* name : {"homo-sparse", "homo-pseudo-dense", "homo-dense", "hetero-sparse", "hetero-dense"}) {
        CHECK(design_name(parse_design(name)) == name);
    }
    CHECK_THROWS_AS(parse_design("homo-wide"), DomainError);
    CHECK_THROWS_AS(parse_design("sparse"), DomainError);
    for (Estimator e : {Estimator::rank_1se, Estimator::rank_2se, Estimator::oracle, Estimator::refit,
                        Estimator::lasso}) {
        CHECK(parse_estimator(to_string(e)) == e);
    }
    CHECK_THROWS_AS(parse_estimator("ridge"), DomainError);
    SimDesign small;
    small.p = 8;
    CHECK_THROWS_AS(small.validate(), DomainError);
}

TEST_CASE("generation is deterministic") {
    SimDesign design;
    design.n = 50;
    design.p = 10;
    Rng a(3);
    Rng b(3);
    const Dataset da = generate_dataset(design, a);
    const Dataset db = generate_dataset(design, b);
    CHECK(da.y == db.y);
    CHECK(da.x == db.x);
    CHECK(da.d == db.d);
}

TEST_CASE("common substream repeats the same replication") {
    SimDesign design;
    design.n = 120;
    design.p = 10;
    McOptions options;
    options.n_reps = 2;
    options.common_substream = true;
    options.estimate.lambda_sims = 100;
    const McMetrics metrics = run_monte_carlo(design, options);
    CHECK(metrics.failures == 0);
    REQUIRE(metrics.rows.size() == options.estimators.size());
    for (const McRow& row : metrics.rows) {
        CHECK(row.replications == 2);
        CHECK(row.n_variance == 0.0);
    }
}

TEST_CASE("Monte Carlo results do not depend on the thread count") {
    SimDesign design;
    design.n = 120;
    design.p = 10;
    McOptions options;
    options.n_reps = 3;
    options.estimate.lambda_sims = 100;
    options.tau_list = {0.3, 0.5};
    const McMetrics one = run_monte_carlo(design, options);
    options.threads = 3;
    const McMetrics three = run_monte_carlo(design, options);
    REQUIRE(one.rows.size() == three.rows.size());
    for (std::size_t k = 0; k < one.rows.size(); ++k) {
        CHECK(one.rows[k].sqrt_n_bias == three.rows[k].sqrt_n_bias);
        CHECK(one.rows[k].n_variance == three.rows[k].n_variance);
        CHECK(one.rows[k].coverage == three.rows[k].coverage);
    }
}

TEST_CASE("oracle comparator is calibrated in low dimension") {
    SimDesign design;
    design.n = 800;
    design.p = 10;
    McOptions options;
    options.n_reps = 60;
    options.estimators = {Estimator::oracle};
    options.estimate.lambda_sims = 100;
    options.seed = 12;
    const McMetrics metrics = run_monte_carlo(design, options);
    REQUIRE(metrics.rows.size() == 1);
    const McRow& row = metrics.rows[0];
    CHECK(std::abs(row.standardized_mean) <= 0.45);
    CHECK(row.standardized_variance >= 0.55);
    CHECK(row.standardized_variance <= 1.6);
    CHECK(row.coverage >= 0.85);
}
