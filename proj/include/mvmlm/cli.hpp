#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace mvmlm {

inline constexpr const char* kVersion = "0.1.0";

/// Entry point of the command-line tool. Exit codes: 0 ok, 1 domain error
/// (JSON record on `err`), 2 usage error.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run_cli(int argc, char** argv);

}  // namespace mvmlm
