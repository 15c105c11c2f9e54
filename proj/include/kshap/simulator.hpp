#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "kshap/dataset.hpp"

namespace kshap {

// ---------------------------------------------------------------------------
// Market configuration
// ---------------------------------------------------------------------------

struct FundamentalParams {
  double mean = 100.0;          // long-run price level
  double kappa = 1e-3;          // mean-reversion rate per second
  double sigma = 0.0112;        // volatility per sqrt(second)
  double obs_noise_std = 0.05;  // private observation noise per wake
};

struct MarketConfig {
  int n_noise = 0;
  int n_fundamental = 0;
  int n_momentum = 0;  // per momentum window pair
  int n_market_makers = 0;
  std::vector<std::pair<double, double>> momentum_windows;  // (delta1, delta2) minutes
  double horizon = 3900.0;  // simulated seconds
  double step = 1.0;        // simulated seconds per tick
  FundamentalParams fundamental;
  double tick_size = 0.01;
  int max_order_size = 100;
  std::uint64_t seed = 0;

  void validate() const;
  // Names of the strategies present (label order), e.g. "momentum_12_26".
  std::vector<std::string> label_names() const;
};

// The miniature analog of the paper's three-strategy scenario:
// 2 market makers, 110 fundamental traders, 15 (12,26)-momentum traders.
MarketConfig pi3_analog_config(std::uint64_t seed, double horizon = 3900.0);

// ---------------------------------------------------------------------------
// Fundamental value process (Ornstein-Uhlenbeck discretization)
//
// x_{t+1} = x_t + kappa * (mean - x_t) * step + sigma * sqrt(step) * xi
// ---------------------------------------------------------------------------

std::vector<double> fundamental_process(double mean, double kappa, double sigma,
                                        double step, double horizon,
                                        std::uint64_t seed);

// ---------------------------------------------------------------------------
// Order book state
//
// Five price levels per side plus the per-tick history needed by the feature
// computation: executed buy/sell volumes and mid/spread series covering the
// longest moving-average window.
// ---------------------------------------------------------------------------

class BookState {
 public:
  static constexpr int kLevels = 5;

  BookState(double tick_size, double step) : tick_size_(tick_size), step_(step) {}

  bool has_bids() const { return !bids_.empty(); }
  bool has_asks() const { return !asks_.empty(); }
  int best_bid() const { return bids_.begin()->first; }    // integer ticks
  int best_ask() const { return asks_.begin()->first; }
  int spread_ticks() const { return best_ask() - best_bid(); }
  double mid_price() const {
    return 0.5 * (best_bid() + best_ask()) * tick_size_;
  }
  double last_mid() const { return last_mid_; }
  double tick_size() const { return tick_size_; }
  double step_seconds() const { return step_; }
  long long trade_count() const { return trades_; }
  int now_tick() const { return now_tick_; }

  // Volume at price offset `level` (1-based) from the touch; 0 for gaps.
  double bid_depth(int level) const;
  double ask_depth(int level) const;

  // expire_tick >= 0 schedules time-in-force removal of the added volume.
  void add_volume(bool bid_side, int price_ticks, double volume, int expire_tick = -1);
  // Removes up to `volume` at the given price (quote replacement / expiry).
  void remove_volume(bool bid_side, int price_ticks, double volume);
  // Consumes volume at the opposite best for an aggressive order; returns the
  // executed quantity and records it on the trade tape.
  double execute_aggressive(bool buy, double volume);

  // Tick lifecycle: record tick-start history, then close collects the tick's
  // executed volumes.
  void begin_tick(int tick);
  void close_tick();
  void record_trade(bool buyer_aggressor, double volume);

  // Trailing executed volumes in (buy, sell) over the last `seconds`,
  // including the currently accumulating tick.
  std::pair<double, double> exec_volume_window(double seconds) const;

  // Trailing means over per-tick history including the current tick entry.
  double mid_ma(double seconds) const;
  double spread_ma(double seconds) const;
  // Mid price `seconds` ago (clamped to the earliest recorded tick).
  double mid_lagged(double seconds) const;

  void prune_deep_levels();

  const std::map<int, double, std::greater<int>>& bids() const { return bids_; }
  const std::map<int, double>& asks() const { return asks_; }

 private:
  double window_mean(const std::vector<double>& cum, double seconds) const;

  double tick_size_;
  double step_;
  std::map<int, double, std::greater<int>> bids_;  // price ticks -> volume
  std::map<int, double> asks_;
  // time-in-force ledger: expiry tick -> (bid side, price, volume)
  std::map<int, std::vector<std::tuple<bool, int, double>>> expiries_;
  std::vector<double> mid_hist_, spread_hist_;   // value at start of tick
  std::vector<double> cum_mid_, cum_spread_;     // prefix sums, cum[i] = sum of first i
  std::vector<double> cum_buy_, cum_sell_;       // prefix sums over closed ticks
  double cur_buy_ = 0.0, cur_sell_ = 0.0;        // accumulating tick
  long long trades_ = 0;
  double last_mid_ = 0.0;
  int now_tick_ = -1;
};

// The 29-feature snapshot (market-v1 order). Throws InsufficientHistory when
// no trade has ever executed.
std::vector<double> compute_features(const BookState& book, int now_tick);

// ---------------------------------------------------------------------------
// Scenario runners
// ---------------------------------------------------------------------------

// Runs the continuous-double-auction market and returns a labeled dataset in
// the market-v1 schema, one row per placed order, sorted by timestamp.
// Bit-deterministic for a fixed config.
Dataset run_market(const MarketConfig& config);

enum class PdScenario {
  defect_vs_cooperate,   // AlwaysDefect vs AlwaysCooperate
  cooperate_vs_flipper,  // AlwaysCooperate vs Flipper
};

enum class PdStateMode { null_state, full };

PdScenario pd_scenario_from_string(const std::string& name);
std::string pd_scenario_name(PdScenario s);

// 2 * rounds labeled observations in the pd-v1 schema. Actions are
// 0 = cooperate, 1 = defect.
Dataset run_prisoners_dilemma(PdScenario scenario, int rounds, PdStateMode state_mode,
                              std::uint64_t seed);

}  // namespace kshap
