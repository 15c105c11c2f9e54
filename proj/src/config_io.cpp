#include "kshap/config_io.hpp"

#include <fstream>
#include <set>

#include <json.hpp>

namespace kshap {

namespace {

using nlohmann::json;

void reject_unknown_keys(const json& j, const std::set<std::string>& known,
                         const std::string& where) {
  for (const auto& [key, value] : j.items())
    if (!known.count(key))
      throw Error(Errc::invalid_config, "unknown key '" + key + "' in " + where);
}

}  // namespace

MarketConfig market_config_from_json_string(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw Error(Errc::invalid_config, std::string("config is not valid JSON: ") + e.what());
  }
  reject_unknown_keys(j,
                      {"n_noise", "n_fundamental", "n_momentum", "n_market_makers",
                       "momentum_windows", "horizon", "step", "fundamental", "tick_size",
                       "max_order_size", "seed"},
                      "market config");
  MarketConfig c;
  try {
    c.n_noise = j.value("n_noise", c.n_noise);
    c.n_fundamental = j.value("n_fundamental", c.n_fundamental);
    c.n_momentum = j.value("n_momentum", c.n_momentum);
    c.n_market_makers = j.value("n_market_makers", c.n_market_makers);
    if (j.contains("momentum_windows")) {
      c.momentum_windows.clear();
      for (const auto& w : j.at("momentum_windows")) {
        if (!w.is_array() || w.size() != 2)
          throw Error(Errc::invalid_config,
                      "momentum_windows entries must be [delta1, delta2] pairs");
        c.momentum_windows.emplace_back(w[0].get<double>(), w[1].get<double>());
      }
    }
    c.horizon = j.value("horizon", c.horizon);
    c.step = j.value("step", c.step);
    if (j.contains("fundamental")) {
      const auto& f = j.at("fundamental");
      reject_unknown_keys(f, {"mean", "kappa", "sigma", "obs_noise_std"},
                          "market config fundamental");
      c.fundamental.mean = f.value("mean", c.fundamental.mean);
      c.fundamental.kappa = f.value("kappa", c.fundamental.kappa);
      c.fundamental.sigma = f.value("sigma", c.fundamental.sigma);
      c.fundamental.obs_noise_std = f.value("obs_noise_std", c.fundamental.obs_noise_std);
    }
    c.tick_size = j.value("tick_size", c.tick_size);
    c.max_order_size = j.value("max_order_size", c.max_order_size);
    c.seed = j.value("seed", c.seed);
  } catch (const json::exception& e) {
    throw Error(Errc::invalid_config, std::string("bad market config value: ") + e.what());
  }
  c.validate();
  return c;
}

MarketConfig market_config_from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::io_failure, "cannot open '" + path + "' for reading");
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return market_config_from_json_string(text);
}

std::string market_config_to_json_string(const MarketConfig& c) {
  json j;
  j["n_noise"] = c.n_noise;
  j["n_fundamental"] = c.n_fundamental;
  j["n_momentum"] = c.n_momentum;
  j["n_market_makers"] = c.n_market_makers;
  json windows = json::array();
  for (const auto& [d1, d2] : c.momentum_windows) windows.push_back({d1, d2});
  j["momentum_windows"] = std::move(windows);
  j["horizon"] = c.horizon;
  j["step"] = c.step;
  j["fundamental"] = {{"mean", c.fundamental.mean},
                      {"kappa", c.fundamental.kappa},
                      {"sigma", c.fundamental.sigma},
                      {"obs_noise_std", c.fundamental.obs_noise_std}};
  j["tick_size"] = c.tick_size;
  j["max_order_size"] = c.max_order_size;
  j["seed"] = c.seed;
  return j.dump(2);
}

}  // namespace kshap
