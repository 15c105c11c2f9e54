#include "kshap/simulator.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <numeric>

namespace kshap {

namespace {

constexpr std::uint64_t kFundamentalStream = 0xF0DA;
constexpr std::uint64_t kScheduleStream = 0x5C4ED;
constexpr std::uint64_t kAgentStream = 0xA6E27;

constexpr double kStarterVolume = 20.0;
constexpr double kMakerVolumeFraction = 0.08;
constexpr double kAggressiveProb = 0.10;
constexpr double kFundamentalWakeSeconds = 60.0;
constexpr double kMomentumWakeSeconds = 10.0;
constexpr int kMakerRefreshTicks = 10;  // full-ladder refresh cadence
constexpr double kOrderLifetimeSeconds = 20.0;  // passive order time in force

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

}  // namespace

// ---------------------------------------------------------------------------
// MarketConfig
// ---------------------------------------------------------------------------

void MarketConfig::validate() const {
  auto fail = [](const std::string& msg) { throw Error(Errc::invalid_config, msg); };
  if (n_noise < 0 || n_fundamental < 0 || n_momentum < 0 || n_market_makers < 0)
    fail("agent counts must be >= 0");
  int momentum_total = n_momentum * static_cast<int>(momentum_windows.size());
  if (n_noise + n_fundamental + momentum_total + n_market_makers < 1)
    fail("at least one agent is required");
  if (!(horizon > 0.0)) fail("horizon must be > 0");
  if (!(step > 0.0)) fail("step must be > 0");
  if (!(tick_size > 0.0)) fail("tick_size must be > 0");
  if (max_order_size < 1) fail("max_order_size must be >= 1");
  if (fundamental.kappa < 0.0 || fundamental.sigma < 0.0 || fundamental.obs_noise_std < 0.0)
    fail("fundamental parameters must be >= 0");
  for (const auto& [d1, d2] : momentum_windows)
    if (!(d1 > 0.0 && d1 < d2)) fail("momentum windows require 0 < delta1 < delta2");
  if (n_momentum > 0 && momentum_windows.empty())
    fail("n_momentum > 0 requires at least one momentum window");
}

std::vector<std::string> MarketConfig::label_names() const {
  std::vector<std::string> names;
  if (n_noise > 0) names.push_back("noise");
  if (n_fundamental > 0) names.push_back("fundamental");
  if (n_momentum > 0)
    for (const auto& [d1, d2] : momentum_windows) {
      auto fmt = [](double m) {
        double r = std::round(m);
        if (std::abs(m - r) < 1e-9) return std::to_string(static_cast<long long>(r));
        std::string s = std::to_string(m);
        s.erase(s.find_last_not_of('0') + 1);
        if (!s.empty() && s.back() == '.') s.pop_back();
        std::replace(s.begin(), s.end(), '.', 'p');
        return s;
      };
      names.push_back("momentum_" + fmt(d1) + "_" + fmt(d2));
    }
  if (n_market_makers > 0) names.push_back("market_maker");
  return names;
}

MarketConfig pi3_analog_config(std::uint64_t seed, double horizon) {
  MarketConfig c;
  c.n_noise = 0;
  c.n_fundamental = 110;
  c.n_momentum = 15;
  c.momentum_windows = {{12.0, 26.0}};
  c.n_market_makers = 2;
  c.horizon = horizon;
  c.step = 1.0;
  c.seed = seed;
  return c;
}

// ---------------------------------------------------------------------------
// Fundamental value process
// ---------------------------------------------------------------------------

std::vector<double> fundamental_process(double mean, double kappa, double sigma,
                                        double step, double horizon,
                                        std::uint64_t seed) {
  if (kappa < 0.0 || sigma < 0.0)
    throw Error(Errc::invalid_config, "kappa and sigma must be >= 0");
  std::size_t n = static_cast<std::size_t>(std::ceil(horizon / step));
  std::vector<double> path(n + 1);
  Rng rng(mix64(seed, kFundamentalStream));
  double sqrt_step = std::sqrt(step);
  double x = mean;
  path[0] = x;
  for (std::size_t t = 1; t <= n; ++t) {
    x += kappa * (mean - x) * step + sigma * sqrt_step * rng.normal();
    path[t] = x;
  }
  return path;
}

// ---------------------------------------------------------------------------
// BookState
// ---------------------------------------------------------------------------

double BookState::bid_depth(int level) const {
  if (bids_.empty()) return 0.0;
  auto it = bids_.find(best_bid() - (level - 1));
  return it == bids_.end() ? 0.0 : it->second;
}

double BookState::ask_depth(int level) const {
  if (asks_.empty()) return 0.0;
  auto it = asks_.find(best_ask() + (level - 1));
  return it == asks_.end() ? 0.0 : it->second;
}

void BookState::add_volume(bool bid_side, int price_ticks, double volume,
                           int expire_tick) {
  if (volume <= 0.0) return;
  if (bid_side)
    bids_[price_ticks] += volume;
  else
    asks_[price_ticks] += volume;
  if (expire_tick >= 0) expiries_[expire_tick].emplace_back(bid_side, price_ticks, volume);
  if (has_bids() && has_asks()) last_mid_ = mid_price();
}

void BookState::remove_volume(bool bid_side, int price_ticks, double volume) {
  auto erase_from = [&](auto& side) {
    auto it = side.find(price_ticks);
    if (it == side.end()) return;
    it->second -= volume;
    if (it->second <= 1e-9) side.erase(it);
  };
  if (bid_side)
    erase_from(bids_);
  else
    erase_from(asks_);
  if (has_bids() && has_asks()) last_mid_ = mid_price();
}

double BookState::execute_aggressive(bool buy, double volume) {
  auto take = [&](auto& side) -> double {
    if (side.empty()) return 0.0;
    auto it = side.begin();
    double executed = std::min(volume, it->second);
    it->second -= executed;
    if (it->second <= 1e-9) side.erase(it);
    return executed;
  };
  double executed = buy ? take(asks_) : take(bids_);
  if (executed > 0.0) record_trade(buy, executed);
  if (has_bids() && has_asks()) last_mid_ = mid_price();
  return executed;
}

void BookState::begin_tick(int tick) {
  now_tick_ = tick;
  while (!expiries_.empty() && expiries_.begin()->first <= tick) {
    for (const auto& [bid_side, price, volume] : expiries_.begin()->second)
      remove_volume(bid_side, price, volume);
    expiries_.erase(expiries_.begin());
  }
  double mid = (has_bids() && has_asks()) ? mid_price() : last_mid_;
  double spread = (has_bids() && has_asks()) ? static_cast<double>(spread_ticks())
                                             : (spread_hist_.empty() ? 1.0 : spread_hist_.back());
  mid_hist_.push_back(mid);
  spread_hist_.push_back(spread);
  if (cum_mid_.empty()) {
    cum_mid_.push_back(0.0);
    cum_spread_.push_back(0.0);
  }
  cum_mid_.push_back(cum_mid_.back() + mid);
  cum_spread_.push_back(cum_spread_.back() + spread);
}

void BookState::close_tick() {
  if (cum_buy_.empty()) {
    cum_buy_.push_back(0.0);
    cum_sell_.push_back(0.0);
  }
  cum_buy_.push_back(cum_buy_.back() + cur_buy_);
  cum_sell_.push_back(cum_sell_.back() + cur_sell_);
  cur_buy_ = 0.0;
  cur_sell_ = 0.0;
}

void BookState::record_trade(bool buyer_aggressor, double volume) {
  if (buyer_aggressor)
    cur_buy_ += volume;
  else
    cur_sell_ += volume;
  ++trades_;
}

std::pair<double, double> BookState::exec_volume_window(double seconds) const {
  long long k = std::max<long long>(1, std::llround(seconds / step_));
  long long closed = static_cast<long long>(cum_buy_.size()) - 1;  // closed ticks
  if (closed < 0) closed = 0;
  long long take = std::min<long long>(k - 1, closed);
  double buy = cur_buy_, sell = cur_sell_;
  if (take > 0) {
    buy += cum_buy_[closed] - cum_buy_[closed - take];
    sell += cum_sell_[closed] - cum_sell_[closed - take];
  }
  return {buy, sell};
}

double BookState::window_mean(const std::vector<double>& cum, double seconds) const {
  long long n = static_cast<long long>(cum.size()) - 1;
  if (n <= 0) return 0.0;
  long long k = std::max<long long>(1, std::llround(seconds / step_));
  k = std::min(k, n);
  return (cum[n] - cum[n - k]) / static_cast<double>(k);
}

double BookState::mid_ma(double seconds) const { return window_mean(cum_mid_, seconds); }

double BookState::spread_ma(double seconds) const {
  return window_mean(cum_spread_, seconds);
}

double BookState::mid_lagged(double seconds) const {
  if (mid_hist_.empty()) return last_mid_;
  long long k = std::llround(seconds / step_);
  long long idx = std::max<long long>(0, now_tick_ - k);
  idx = std::min<long long>(idx, static_cast<long long>(mid_hist_.size()) - 1);
  return mid_hist_[static_cast<std::size_t>(idx)];
}

void BookState::prune_deep_levels() {
  if (has_bids()) {
    int cutoff = best_bid() - (kLevels - 1);
    for (auto it = bids_.begin(); it != bids_.end();)
      it = (it->first < cutoff) ? bids_.erase(it) : std::next(it);
  }
  if (has_asks()) {
    int cutoff = best_ask() + (kLevels - 1);
    for (auto it = asks_.begin(); it != asks_.end();)
      it = (it->first > cutoff) ? asks_.erase(it) : std::next(it);
  }
}

// ---------------------------------------------------------------------------
// Features
// ---------------------------------------------------------------------------

std::vector<double> compute_features(const BookState& book, int now_tick) {
  if (book.trade_count() == 0)
    throw Error(Errc::insufficient_history, "no executed trade in the book history");
  if (!book.has_bids() || !book.has_asks())
    throw Error(Errc::insufficient_history, "book is missing a side");
  (void)now_tick;

  std::vector<double> f;
  f.reserve(29);

  f.push_back(static_cast<double>(book.spread_ticks()));

  auto volume_imbalance = [&](int levels) {
    double bid = 0.0, ask = 0.0;
    for (int l = 1; l <= levels; ++l) {
      bid += book.bid_depth(l);
      ask += book.ask_depth(l);
    }
    double total = bid + ask;
    return total > 0.0 ? bid / total : 0.5;
  };
  f.push_back(volume_imbalance(1));
  f.push_back(volume_imbalance(2));
  f.push_back(volume_imbalance(5));

  const double kExecWindows[] = {60.0, 300.0, 720.0, 1560.0};
  for (double w : kExecWindows) {
    auto [buy, sell] = book.exec_volume_window(w);
    double total = buy + sell;
    f.push_back(total > 0.0 ? buy / total : 0.5);
  }

  double mid = book.mid_price();
  for (double w : kExecWindows) {
    double lag = book.mid_lagged(w);
    f.push_back(lag != 0.0 ? (mid - lag) / lag : 0.0);
  }

  const double kPriceWindows[] = {12.0, 26.0, 60.0, 300.0, 720.0, 1560.0, 2880.0, 5760.0};
  for (double w : kPriceWindows) f.push_back(book.mid_ma(w));

  const double kSpreadWindows[] = {12.0, 26.0, 60.0, 300.0, 720.0, 1560.0};
  for (double w : kSpreadWindows) f.push_back(book.spread_ma(w));

  // Moving-average crossings squashed to [0, 1].
  double tick = book.tick_size();
  f.push_back(sigmoid((book.mid_ma(12.0) - book.mid_ma(26.0)) / tick));
  f.push_back(sigmoid((book.mid_ma(720.0) - book.mid_ma(1560.0)) / tick));
  f.push_back(sigmoid((book.mid_ma(2880.0) - book.mid_ma(5760.0)) / tick));

  return f;
}

// ---------------------------------------------------------------------------
// Market run
// ---------------------------------------------------------------------------

namespace {

enum class Strategy { noise, fundamental, momentum, market_maker };

struct Agent {
  Strategy strategy;
  int label = 0;
  int momentum_window = -1;  // index into config.momentum_windows
  Rng rng;
  int mm_phase = 0;
  // Market-maker resting quotes per slot: price in ticks and size; size 0 = none.
  std::array<int, 10> slot_price{};
  std::array<double, 10> slot_size{};

  explicit Agent(Strategy s, std::uint64_t stream_seed) : strategy(s), rng(stream_seed) {}
};

struct PendingWake {
  double frac;  // position within the tick, for ordering
  int agent;
  bool operator<(const PendingWake& o) const {
    return frac != o.frac ? frac < o.frac : agent < o.agent;
  }
};

}  // namespace

Dataset run_market(const MarketConfig& config) {
  config.validate();
  const double step = config.step;
  const int n_ticks = static_cast<int>(std::ceil(config.horizon / step));
  const double tick_size = config.tick_size;

  std::vector<double> fundamental_path =
      fundamental_process(config.fundamental.mean, config.fundamental.kappa,
                          config.fundamental.sigma, step, config.horizon, config.seed);

  // Label ids are contiguous over the strategies present, in the fixed order
  // noise, fundamental, momentum windows, market maker.
  int next_label = 0;
  int label_noise = config.n_noise > 0 ? next_label++ : -1;
  int label_fundamental = config.n_fundamental > 0 ? next_label++ : -1;
  std::vector<int> label_momentum(config.momentum_windows.size(), -1);
  if (config.n_momentum > 0)
    for (std::size_t w = 0; w < config.momentum_windows.size(); ++w)
      label_momentum[w] = next_label++;
  int label_mm = config.n_market_makers > 0 ? next_label++ : -1;

  std::vector<Agent> agents;
  auto add_agents = [&](int count, Strategy s, int label, int window) {
    for (int i = 0; i < count; ++i) {
      Agent a(s, mix64(config.seed, kAgentStream, agents.size()));
      a.label = label;
      a.momentum_window = window;
      if (s == Strategy::market_maker)
        a.mm_phase = 3 + (i * 5) % kMakerRefreshTicks;
      agents.push_back(std::move(a));
    }
  };
  add_agents(config.n_noise, Strategy::noise, label_noise, -1);
  add_agents(config.n_fundamental, Strategy::fundamental, label_fundamental, -1);
  for (std::size_t w = 0; w < config.momentum_windows.size(); ++w)
    add_agents(config.n_momentum, Strategy::momentum, label_momentum[w],
               static_cast<int>(w));
  add_agents(config.n_market_makers, Strategy::market_maker, label_mm, -1);

  // Wake schedule (market makers act every tick and are handled separately).
  std::vector<std::vector<PendingWake>> wakes(n_ticks);
  auto schedule = [&](int agent_idx, double t_seconds) {
    if (t_seconds >= config.horizon) return;
    int tick = static_cast<int>(t_seconds / step);
    if (tick >= n_ticks) return;
    wakes[tick].push_back({t_seconds - tick * step, agent_idx});
  };
  for (std::size_t i = 0; i < agents.size(); ++i) {
    Rng sched(mix64(config.seed, kScheduleStream, i));
    switch (agents[i].strategy) {
      case Strategy::noise:
        schedule(static_cast<int>(i), sched.uniform(0.0, config.horizon));
        break;
      case Strategy::fundamental:
        for (double base = 0.0; base < config.horizon; base += kFundamentalWakeSeconds)
          schedule(static_cast<int>(i), base + sched.uniform(0.0, kFundamentalWakeSeconds));
        break;
      case Strategy::momentum:
        // Aligned wake grid: all momentum traders act within the same tick
        // (ordered by a per-wake jitter), which is how the shared signal
        // reaches the market as a burst.
        for (double base = 0.0; base < config.horizon; base += kMomentumWakeSeconds)
          schedule(static_cast<int>(i), base + sched.uniform(0.0, config.step));
        break;
      case Strategy::market_maker:
        break;
    }
  }
  for (auto& tick_wakes : wakes) std::sort(tick_wakes.begin(), tick_wakes.end());

  // Opening book: a small symmetric ladder around the fundamental mean.
  BookState book(tick_size, step);
  int p0 = static_cast<int>(std::floor(config.fundamental.mean / tick_size));
  const int lifetime_ticks = std::max(1, static_cast<int>(kOrderLifetimeSeconds / step));
  for (int l = 0; l < BookState::kLevels; ++l) {
    book.add_volume(true, p0 - l, kStarterVolume, lifetime_ticks);
    book.add_volume(false, p0 + 1 + l, kStarterVolume, lifetime_ticks);
  }

  Dataset out(builtin_schema("market-v1"));
  std::vector<double> action(3);

  // Replenishes an emptied side so the touch stays quotable. Pure book
  // maintenance: no observation row is emitted.
  auto ensure_sides = [&](const char* context) {
    if (book.has_bids() && book.has_asks()) return;
    if (config.n_market_makers == 0)
      throw Error(Errc::degenerate_market,
                  std::string("book side emptied and no market maker can quote (") +
                      context + ", tick " + std::to_string(book.now_tick()) + ")");
    if (!book.has_bids()) {
      int price = book.has_asks()
                      ? book.best_ask() - 1
                      : static_cast<int>(std::floor(book.last_mid() / tick_size));
      book.add_volume(true, price, kStarterVolume, book.now_tick() + lifetime_ticks);
    }
    if (!book.has_asks()) {
      int price = book.has_bids()
                      ? book.best_bid() + 1
                      : static_cast<int>(std::floor(book.last_mid() / tick_size)) + 1;
      book.add_volume(false, price, kStarterVolume, book.now_tick() + lifetime_ticks);
    }
  };

  std::int64_t step_ns = static_cast<std::int64_t>(step * 1e9);

  for (int t = 0; t < n_ticks; ++t) {
    book.begin_tick(t);
    if (t == 0) {
      // Opening print: anchors the executed-volume windows with a neutral
      // half-buy half-sell trade.
      book.record_trade(true, kStarterVolume * 2.5);
      book.record_trade(false, kStarterVolume * 2.5);
    }
    std::int64_t tick_ns = static_cast<std::int64_t>(t) * step_ns;
    std::int64_t seq = 0;

    auto emit = [&](std::size_t agent_idx, const std::vector<double>& state, double size,
                    double depth, double direction) {
      action[0] = size;
      action[1] = depth;
      action[2] = direction;
      out.add_row(state, action, agents[agent_idx].label,
                  static_cast<std::int64_t>(agent_idx), tick_ns + seq * 1000);
      ++seq;
    };

    // Market makers re-quote their whole ladder in one burst, one order per
    // level and side; each placed order is an observation. The two makers are
    // staggered half a cycle apart.
    for (std::size_t i = 0; i < agents.size(); ++i) {
      Agent& mm = agents[i];
      if (mm.strategy != Strategy::market_maker) continue;
      if ((t + mm.mm_phase) % kMakerRefreshTicks != 0) continue;
      ensure_sides("market maker refresh");

      auto [bvol, svol] = book.exec_volume_window(60.0);
      double size = std::clamp(std::round(kMakerVolumeFraction * (bvol + svol) / 5.0),
                               1.0, static_cast<double>(config.max_order_size));
      for (int slot = 0; slot < 10; ++slot) {
        bool bid_side = slot < 5;
        int level = slot % 5;
        ensure_sides("market maker ladder");
        std::vector<double> state = compute_features(book, t);
        int improve = book.spread_ticks() >= 2 ? 1 : 0;
        int price = bid_side ? book.best_bid() + improve - level
                             : book.best_ask() - improve + level;
        double depth = static_cast<double>(level - improve);
        book.add_volume(bid_side, price, size);
        if (mm.slot_size[slot] > 0.0)
          book.remove_volume(bid_side, mm.slot_price[slot], mm.slot_size[slot]);
        mm.slot_price[slot] = price;
        mm.slot_size[slot] = size;
        book.prune_deep_levels();
        emit(i, state, size, depth, bid_side ? 1.0 : 0.0);
      }
    }

    for (const PendingWake& wake : wakes[t]) {
      Agent& agent = agents[wake.agent];
      ensure_sides("agent wake");
      std::vector<double> state = compute_features(book, t);

      bool buy = true;
      double size = 1.0;
      bool aggressive = false;
      switch (agent.strategy) {
        case Strategy::noise: {
          buy = agent.rng.uniform() < 0.5;
          size = 1.0 + static_cast<double>(agent.rng.uniform_int(config.max_order_size));
          break;
        }
        case Strategy::fundamental: {
          double observed = fundamental_path[std::min<std::size_t>(t, fundamental_path.size() - 1)] +
                            agent.rng.normal() * config.fundamental.obs_noise_std;
          buy = book.mid_price() <= observed;
          size = 1.0 + static_cast<double>(agent.rng.uniform_int(config.max_order_size));
          aggressive = agent.rng.uniform() < kAggressiveProb;
          break;
        }
        case Strategy::momentum: {
          const auto& [d1, d2] = config.momentum_windows[agent.momentum_window];
          buy = book.mid_ma(d1 * 60.0) >= book.mid_ma(d2 * 60.0);
          size = 1.0 + static_cast<double>(agent.rng.uniform_int(config.max_order_size));
          break;
        }
        case Strategy::market_maker:
          continue;  // handled above
      }

      double depth = 0.0;
      if (aggressive) {
        depth = -static_cast<double>(book.spread_ticks());
        book.execute_aggressive(buy, size);
        ensure_sides("after execution");
      } else {
        int price = buy ? book.best_bid() : book.best_ask();
        book.add_volume(buy, price, size, t + lifetime_ticks);
      }
      book.prune_deep_levels();
      emit(wake.agent, state, size, depth, buy ? 1.0 : 0.0);
    }

    book.close_tick();
  }

  out.validate_labels();
  return out;
}

// ---------------------------------------------------------------------------
// Prisoner's dilemma
// ---------------------------------------------------------------------------

PdScenario pd_scenario_from_string(const std::string& name) {
  std::string s;
  for (char c : name) s += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  if (s == "defect-vs-cooperate" || s == "alwaysdefect-vs-alwayscooperate")
    return PdScenario::defect_vs_cooperate;
  if (s == "cooperate-vs-flipper" || s == "alwayscooperate-vs-flipper")
    return PdScenario::cooperate_vs_flipper;
  throw Error(Errc::invalid_config, "unknown prisoner's dilemma scenario '" + name + "'");
}

std::string pd_scenario_name(PdScenario s) {
  return s == PdScenario::defect_vs_cooperate ? "defect-vs-cooperate"
                                              : "cooperate-vs-flipper";
}

Dataset run_prisoners_dilemma(PdScenario scenario, int rounds, PdStateMode state_mode,
                              std::uint64_t seed) {
  (void)seed;  // strategies are deterministic; kept for interface symmetry
  if (rounds < 2) throw Error(Errc::invalid_config, "rounds must be >= 2");

  const bool full = state_mode == PdStateMode::full;
  Dataset out(full ? builtin_schema("pd-v1") : pd_null_schema());

  // prev[i] holds agent i's action in the previous round. Initial values are
  // each strategy's disposition in a virtual warm-up round, so the first
  // emitted round already has a well-defined "previous action" and the
  // flipper's first emitted move is cooperate.
  double prev[2];
  if (scenario == PdScenario::defect_vs_cooperate) {
    prev[0] = 1.0;  // AlwaysDefect
    prev[1] = 0.0;  // AlwaysCooperate
  } else {
    prev[0] = 0.0;  // AlwaysCooperate
    prev[1] = 1.0;  // Flipper (flips to cooperate on its first move)
  }

  std::vector<double> state(full ? 2 : 1, 0.0);
  std::vector<double> action(1);

  for (int r = 0; r < rounds; ++r) {
    double a0, a1;
    if (scenario == PdScenario::defect_vs_cooperate) {
      a0 = 1.0;
      a1 = 0.0;
    } else {
      a0 = 0.0;
      a1 = 1.0 - prev[1];
    }
    double acts[2] = {a0, a1};
    for (int agent = 0; agent < 2; ++agent) {
      if (full) {
        state[0] = static_cast<double>(r);
        // State is (time-step, previous opponent action) in the
        // defect-vs-cooperate scenario and (time-step, previous own action)
        // for cooperate-vs-flipper.
        state[1] = scenario == PdScenario::defect_vs_cooperate ? prev[1 - agent] : prev[agent];
      }
      action[0] = acts[agent];
      out.add_row(state, action, agent, agent, static_cast<std::int64_t>(r));
    }
    prev[0] = a0;
    prev[1] = a1;
  }
  return out;
}

}  // namespace kshap
