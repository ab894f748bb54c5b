#pragma once

#include <Eigen/Dense>

#include <random>

namespace testutil {

inline Eigen::MatrixXd gaussian_matrix(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols) {
    std::normal_distribution<double> normal;
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index j = 0; j < cols; ++j)
        for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = normal(rng);
    return m;
}

inline Eigen::VectorXd gaussian_vector(std::mt19937_64& rng, Eigen::Index size) {
    return gaussian_matrix(rng, size, 1).col(0);
}

/// Gaussian design with an all-ones first column.
inline Eigen::MatrixXd design_with_intercept(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols) {
    Eigen::MatrixXd m = gaussian_matrix(rng, rows, cols);
    m.col(0).setOnes();
    return m;
}

inline double uniform(std::mt19937_64& rng, double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline double relative_gap(double a, double b) { return std::abs(a - b) / std::max(1.0, std::abs(b)); }

} // namespace testutil
