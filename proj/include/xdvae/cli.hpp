#pragma once

#include <iostream>
#include <string>
#include <vector>

namespace xdvae {

// Exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;
inline constexpr int kExitNumeric = 3;

inline constexpr const char* kToolVersion = "0.1.0";

/// `xdvae prepare | train | eval | ablate`. Returns the process exit code.
int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr);
int run_cli(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr);

}  // namespace xdvae
