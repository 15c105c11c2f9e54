#pragma once

#include <string>
#include <vector>

namespace kshap {

constexpr const char* kVersion = "0.1.0";

std::string version_string();

// Documented departures from the reference formulation, echoed into every
// run report.
const std::vector<std::string>& deviations();

// Full command-line entry point. Exit codes: 0 success, 1 runtime failure,
// 2 usage/config failure.
int run_cli(int argc, const char* const* argv);

}  // namespace kshap
