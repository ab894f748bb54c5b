#include "rankscore/dataset.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace rankscore {

namespace {

std::string trim(std::string_view s) {
    std::size_t begin = 0;
    std::size_t end = s.size();
    while (begin < end && std::isspace(static_cast<unsigned char>(s[begin]))) ++begin;
    while (end > begin && std::isspace(static_cast<unsigned char>(s[end - 1]))) --end;
    return std::string(s.substr(begin, end - begin));
}

std::string lower(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return s;
}

std::vector<std::string> split_fields(const std::string& line) {
    std::vector<std::string> fields;
    std::size_t start = 0;
    for (;;) {
        const std::size_t comma = line.find(',', start);
        fields.push_back(trim(std::string_view(line).substr(start, comma - start)));
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    return fields;
}

bool parse_double(const std::string& text, double& value) {
    if (text.empty()) return false;
    const char* first = text.data();
    const char* last = text.data() + text.size();
    if (*first == '+') ++first;
    const auto [ptr, ec] = std::from_chars(first, last, value);
    return ec == std::errc() && ptr == last;
}

std::string location(const std::string& path, std::size_t line) {
    return path + ":" + std::to_string(line);
}

} // namespace

std::vector<Index> Dataset::arm_rows(int arm) const {
    std::vector<Index> rows;
    for (std::size_t i = 0; i < d.size(); ++i) {
        if (d[i] == arm) rows.push_back(static_cast<Index>(i));
    }
    return rows;
}

void Dataset::validate() const {
    if (static_cast<Index>(d.size()) != y.size() || x.rows() != y.size()) {
        throw InputError("dataset lengths disagree (y=" + std::to_string(y.size()) + ", d=" +
                         std::to_string(d.size()) + ", x rows=" + std::to_string(x.rows()) + ")");
    }
    if (y.size() == 0 || x.cols() == 0) {
        throw InputError("dataset is empty");
    }
    for (int value : d) {
        if (value != 0 && value != 1) {
            throw InputError("treatment indicator must be 0 or 1");
        }
    }
    if (!y.allFinite() || !x.allFinite()) {
        throw InputError("dataset contains non-finite values");
    }
    if (!column_names.empty() && static_cast<Index>(column_names.size()) != x.cols()) {
        throw InputError("column name count does not match covariate columns");
    }
}

Dataset load_csv(const std::string& path, const CsvOptions& options) {
    std::ifstream in(path);
    if (!in) {
        throw InputError("cannot open data file " + path);
    }
    std::string line;
    std::size_t line_no = 0;
    std::vector<std::string> header;
    while (std::getline(in, line)) {
        ++line_no;
        if (!trim(line).empty()) {
            header = split_fields(trim(line));
            break;
        }
    }
    if (header.empty()) {
        throw InputError(path + ": empty file");
    }
    const std::size_t width = header.size();
    if (width < 3) {
        throw InputError(location(path, line_no) + ": header needs y,d and at least one covariate");
    }
    if (lower(header[0]) != "y" || lower(header[1]) != "d") {
        throw InputError(location(path, line_no) + ": header must start with y,d");
    }
    for (std::size_t j = 2; j < width; ++j) {
        if (lower(header[j]) != "x" + std::to_string(j - 1)) {
            throw InputError(location(path, line_no) + ": expected header column x" + std::to_string(j - 1) +
                             ", found '" + header[j] + "'");
        }
    }

    std::vector<double> y;
    std::vector<int> d;
    std::vector<double> values;
    while (std::getline(in, line)) {
        ++line_no;
        const std::string text = trim(line);
        if (text.empty()) continue;
        const std::vector<std::string> fields = split_fields(text);
        if (fields.size() != width) {
            throw InputError(location(path, line_no) + ": expected " + std::to_string(width) + " fields, found " +
                             std::to_string(fields.size()));
        }
        double value = 0.0;
        for (std::size_t j = 0; j < width; ++j) {
            if (!parse_double(fields[j], value) || !std::isfinite(value)) {
                throw InputError(location(path, line_no) + ": field " + std::to_string(j + 1) + " ('" + fields[j] +
                                 "') is not a finite number");
            }
            if (j == 0) {
                y.push_back(value);
            } else if (j == 1) {
                if (value != 0.0 && value != 1.0) {
                    throw InputError(location(path, line_no) + ": treatment d must be 0 or 1, found " + fields[j]);
                }
                d.push_back(static_cast<int>(value));
            } else {
                values.push_back(value);
            }
        }
    }
    if (y.empty()) {
        throw InputError(path + ": no data rows");
    }

    Dataset data;
    const auto n = static_cast<Index>(y.size());
    const auto p_raw = static_cast<Index>(width - 2);
    const Index offset = options.add_intercept ? 1 : 0;
    data.y = Eigen::Map<const Vector>(y.data(), n);
    data.d = std::move(d);
    data.x.resize(n, p_raw + offset);
    if (options.add_intercept) {
        data.x.col(0).setOnes();
        data.column_names.push_back("intercept");
    }
    for (Index i = 0; i < n; ++i) {
        for (Index j = 0; j < p_raw; ++j) {
            data.x(i, j + offset) = values[static_cast<std::size_t>(i * p_raw + j)];
        }
    }
    for (Index j = 0; j < p_raw; ++j) {
        data.column_names.push_back("x" + std::to_string(j + 1));
    }
    data.validate();
    return data;
}

void write_csv(const Dataset& data, const std::string& path) {
    data.validate();
    const bool drop_first = !data.column_names.empty() && data.column_names.front() == "intercept" &&
                            (data.x.col(0).array() == 1.0).all();
    const Index first = drop_first ? 1 : 0;
    std::ofstream out(path);
    if (!out) {
        throw InputError("cannot write data file " + path);
    }
    out << "y,d";
    for (Index j = first; j < data.x.cols(); ++j) {
        out << ",x" << (j - first + 1);
    }
    out << '\n';
    char buf[40];
    for (Index i = 0; i < data.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%.17g", data.y[i]);
        out << buf << ',' << data.d[static_cast<std::size_t>(i)];
        for (Index j = first; j < data.x.cols(); ++j) {
            std::snprintf(buf, sizeof buf, "%.17g", data.x(i, j));
            out << ',' << buf;
        }
        out << '\n';
    }
    if (!out) {
        throw InputError("failed writing " + path);
    }
}

Vector load_vector(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw InputError("cannot open vector file " + path);
    }
    std::vector<double> values;
    std::string line;
    std::size_t line_no = 0;
    bool first_content = true;
    while (std::getline(in, line)) {
        ++line_no;
        std::string text = line;
        std::replace(text.begin(), text.end(), ',', ' ');
        std::istringstream tokens(text);
        std::string token;
        std::vector<double> row;
        bool numeric = true;
        while (tokens >> token) {
            double value = 0.0;
            if (!parse_double(token, value) || !std::isfinite(value)) {
                numeric = false;
                break;
            }
            row.push_back(value);
        }
        if (!numeric) {
            if (first_content) {
                first_content = false;
                continue;
            }
            throw InputError(location(path, line_no) + ": '" + token + "' is not a finite number");
        }
        if (!row.empty()) first_content = false;
        values.insert(values.end(), row.begin(), row.end());
    }
    if (values.empty()) {
        throw InputError(path + ": no values");
    }
    return Eigen::Map<const Vector>(values.data(), static_cast<Index>(values.size()));
}

} // namespace rankscore
