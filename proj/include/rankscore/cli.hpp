#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace rankscore {

/// Command line front end: `estimate`, `tune`, `band` and `simulate`.
/// `args` excludes the program name. Returns 0 on success, 1 on a runtime failure and 2 on a
/// usage error; failures print one JSON line to `err`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Reads a flat key=value file (blank lines and '#' comments skipped) into `--key=value` tokens.
std::vector<std::string> config_tokens(const std::string& path);

} // namespace rankscore
