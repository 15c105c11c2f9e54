#pragma once

#include <string>

#include "kshap/simulator.hpp"

namespace kshap {

// JSON document mirroring MarketConfig. Unknown keys are rejected.
MarketConfig market_config_from_json_string(const std::string& text);
MarketConfig market_config_from_file(const std::string& path);
std::string market_config_to_json_string(const MarketConfig& config);

}  // namespace kshap
