#pragma once

#include "rankscore/common.hpp"

#include <string>
#include <vector>

namespace rankscore {

/// Observational sample (Y_i, D_i, X_i).
struct Dataset {
    Vector y;
    std::vector<int> d;
    Matrix x;
    std::vector<std::string> column_names;

    Index size() const { return y.size(); }
    Index columns() const { return x.cols(); }
    /// Row indices with D_i = arm.
    std::vector<Index> arm_rows(int arm) const;
    /// Throws InputError unless lengths agree, d is binary and all values are finite.
    void validate() const;
};

struct CsvOptions {
    /// Prepend an all-ones column named "intercept" to the covariates.
    bool add_intercept = true;
};

/// Reads a CSV with header `y,d,x1,...,xp` (case-insensitive). Errors name the offending line.
Dataset load_csv(const std::string& path, const CsvOptions& options = {});

/// Writes `y,d,x1,...,xp` with 17 significant digits. A leading all-ones column named
/// "intercept" is dropped so that write/load round-trips.
void write_csv(const Dataset& data, const std::string& path);

/// Reads a vector from a file of numbers separated by commas, whitespace or newlines.
/// An optional non-numeric first line is treated as a header.
Vector load_vector(const std::string& path);

} // namespace rankscore
