#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace rankscore {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

/// Base of every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A parameter outside its mathematical domain (tau outside (0,1), negative penalty, ...).
class DomainError : public Error {
public:
    using Error::Error;
};

/// Malformed or non-finite input data.
class InputError : public Error {
public:
    using Error::Error;
};

/// An iterative solver hit its iteration budget before meeting its tolerance.
class ConvergenceError : public Error {
public:
    ConvergenceError(const std::string& what, int iterations, double primal_residual, double dual_residual)
        : Error(what + " (iterations=" + std::to_string(iterations) +
                ", primal_residual=" + std::to_string(primal_residual) +
                ", dual_residual=" + std::to_string(dual_residual) + ")"),
          iterations_(iterations), primal_residual_(primal_residual), dual_residual_(dual_residual) {}

    int iterations() const noexcept { return iterations_; }
    double primal_residual() const noexcept { return primal_residual_; }
    double dual_residual() const noexcept { return dual_residual_; }

private:
    int iterations_;
    double primal_residual_;
    double dual_residual_;
};

/// The debiasing program has no (bounded) solution at the requested gamma.
class InfeasibleError : public Error {
public:
    using Error::Error;
};

/// Sorted set of column indices.
using Support = std::vector<Index>;

inline void require_tau(double tau) {
    if (!(tau > 0.0 && tau < 1.0)) {
        throw DomainError("quantile level must lie in (0,1), got " + std::to_string(tau));
    }
}

inline bool all_finite(const Eigen::Ref<const Matrix>& m) { return m.allFinite(); }

} // namespace rankscore
