#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "kshap/config_io.hpp"
#include "kshap/simulator.hpp"
#include "test_util.hpp"

using namespace kshap;
using kshap::test::TempDir;
using kshap::test::read_file;

namespace {

MarketConfig small_market(std::uint64_t seed, double horizon = 300.0) {
  MarketConfig c = pi3_analog_config(seed, horizon);
  c.n_fundamental = 20;
  c.n_momentum = 5;
  return c;
}

}  // namespace

// ---------------------------------------------------------------------------
// Ornstein-Uhlenbeck fundamental
// ---------------------------------------------------------------------------

TEST_CASE("zero-volatility OU stays at the mean") {
  auto path = fundamental_process(100.0, 0.5, 0.0, 0.1, 10.0, 1);
  CHECK(path.size() == 101);
  for (double v : path) CHECK(v == 100.0);
}

TEST_CASE("deterministic OU decays monotonically toward the mean") {
  // sigma = 0, x drifts from above the mean; kappa * step < 1 so no overshoot
  double mean = 100.0;
  auto path = fundamental_process(mean, 1.0, 0.0, 0.1, 5.0, 1);
  std::vector<double> shifted(path.size());
  double x = mean + 10.0;
  for (std::size_t t = 0; t < shifted.size(); ++t) {
    shifted[t] = x;
    if (t + 1 < shifted.size()) x += 1.0 * (mean - x) * 0.1;
  }
  for (std::size_t t = 1; t < shifted.size(); ++t) {
    CHECK(shifted[t] < shifted[t - 1]);
    CHECK(shifted[t] >= mean);
  }
}

TEST_CASE("OU sample stationary variance matches sigma^2 / (2 kappa) within 10%") {
  double kappa = 1.0, sigma = 0.5, step = 0.01;
  auto path = fundamental_process(0.0, kappa, sigma, step, 1000.0, 123);
  REQUIRE(path.size() == 100001);
  // Skip burn-in, then estimate the variance.
  double sum = 0.0, sum2 = 0.0;
  std::size_t n = 0;
  for (std::size_t t = 1000; t < path.size(); ++t) {
    sum += path[t];
    sum2 += path[t] * path[t];
    ++n;
  }
  double mean = sum / n;
  double var = sum2 / n - mean * mean;
  double expected = sigma * sigma / (2.0 * kappa);
  CHECK(std::abs(var - expected) < 0.10 * expected);
}

// ---------------------------------------------------------------------------
// Features
// ---------------------------------------------------------------------------

TEST_CASE("symmetric book gives 0.5 volume imbalances") {
  BookState book(0.01, 1.0);
  for (int l = 0; l < 5; ++l) {
    book.add_volume(true, 10000 - l, 7.0);
    book.add_volume(false, 10001 + l, 7.0);
  }
  book.begin_tick(0);
  book.record_trade(true, 1.0);
  auto f = compute_features(book, 0);
  REQUIRE(f.size() == 29);
  CHECK(f[1] == doctest::Approx(0.5));
  CHECK(f[2] == doctest::Approx(0.5));
  CHECK(f[3] == doctest::Approx(0.5));
  CHECK(f[0] == doctest::Approx(1.0));  // spread in ticks
}

TEST_CASE("constant price history zeroes returns and aligns MAs") {
  BookState book(0.01, 1.0);
  book.add_volume(true, 10000, 5.0);
  book.add_volume(false, 10001, 5.0);
  for (int t = 0; t < 200; ++t) {
    book.begin_tick(t);
    if (t == 0) book.record_trade(true, 1.0);
    book.close_tick();
  }
  book.begin_tick(200);
  auto f = compute_features(book, 200);
  double mid = book.mid_price();
  for (int i = 8; i < 12; ++i) CHECK(f[i] == doctest::Approx(0.0));   // returns
  for (int i = 12; i < 20; ++i) CHECK(f[i] == doctest::Approx(mid));  // price MAs
  for (int i = 26; i < 29; ++i) CHECK(f[i] == doctest::Approx(0.5));  // MA diffs
}

TEST_CASE("hand-built 3-trade history matches the 1-minute exec imbalance") {
  BookState book(0.01, 1.0);
  book.add_volume(true, 10000, 50.0);
  book.add_volume(false, 10001, 50.0);
  // Tick 0: buy 10. Tick 1: sell 30. Tick 2 (current): buy 20.
  book.begin_tick(0);
  book.record_trade(true, 10.0);
  book.close_tick();
  book.begin_tick(1);
  book.record_trade(false, 30.0);
  book.close_tick();
  book.begin_tick(2);
  book.record_trade(true, 20.0);
  auto f = compute_features(book, 2);
  // Window covers all three trades: buys 30 of 60 total.
  CHECK(f[4] == doctest::Approx(30.0 / 60.0));
  auto [buy, sell] = book.exec_volume_window(60.0);
  CHECK(buy == doctest::Approx(30.0));
  CHECK(sell == doctest::Approx(30.0));
}

TEST_CASE("features require an executed trade") {
  BookState book(0.01, 1.0);
  book.add_volume(true, 10000, 5.0);
  book.add_volume(false, 10001, 5.0);
  book.begin_tick(0);
  CHECK_THROWS_AS((void)compute_features(book, 0), Error);
}

// ---------------------------------------------------------------------------
// Market runs
// ---------------------------------------------------------------------------

TEST_CASE("market run is deterministic at the byte level") {
  TempDir dir;
  MarketConfig c = small_market(42, 120.0);
  Dataset a = run_market(c);
  Dataset b = run_market(c);
  std::string pa = dir.file("a.csv"), pb = dir.file("b.csv");
  save_csv(a, pa);
  save_csv(b, pb);
  CHECK(read_file(pa) == read_file(pb));
  CHECK(a.size() > 0);
}

TEST_CASE("pi3-analog run contains exactly three labels") {
  Dataset d = run_market(pi3_analog_config(7, 180.0));
  std::set<int> labels(d.labels().begin(), d.labels().end());
  CHECK(labels == std::set<int>{0, 1, 2});
  MarketConfig c = pi3_analog_config(7);
  auto names = c.label_names();
  REQUIRE(names.size() == 3);
  CHECK(names[0] == "fundamental");
  CHECK(names[1] == "momentum_12_26");
  CHECK(names[2] == "market_maker");
}

TEST_CASE("config without noise agents emits no noise rows") {
  MarketConfig c = small_market(3, 60.0);
  REQUIRE(c.n_noise == 0);
  Dataset d = run_market(c);
  // Label 0 is fundamental here since noise is absent.
  for (std::size_t i = 0; i < d.size(); ++i) CHECK(d.label(i) <= 2);
}

TEST_CASE("noise rows have size in [1,100] and near-touch depth 0") {
  MarketConfig c;
  c.n_noise = 200;
  c.n_market_makers = 1;
  c.horizon = 400.0;
  c.seed = 5;
  Dataset d = run_market(c);
  bool saw_noise = false;
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (d.label(i) != 0) continue;  // noise label
    saw_noise = true;
    CHECK(d.action(i, 0) >= 1.0);
    CHECK(d.action(i, 0) <= 100.0);
    CHECK(d.action(i, 1) == 0.0);
    CHECK((d.action(i, 2) == 0.0 || d.action(i, 2) == 1.0));
  }
  CHECK(saw_noise);
}

TEST_CASE("market rows satisfy the feature range envelopes") {
  Dataset d = run_market(small_market(11, 200.0));
  for (std::size_t i = 0; i < d.size(); ++i) {
    auto s = d.state_row(i);
    for (double v : s) CHECK(std::isfinite(v));
    for (int j : {1, 2, 3, 4, 5, 6, 7}) {  // volume + exec imbalances
      CHECK(s[j] >= 0.0);
      CHECK(s[j] <= 1.0);
    }
    for (int j : {26, 27, 28}) {
      CHECK(s[j] >= 0.0);
      CHECK(s[j] <= 1.0);
    }
    CHECK(s[0] >= 1.0);  // spread at least one tick
    CHECK(d.action(i, 0) >= 1.0);
    CHECK(d.action(i, 0) <= 100.0);
  }
  // Rows sorted by timestamp.
  for (std::size_t i = 1; i < d.size(); ++i)
    CHECK(d.timestamp(i) >= d.timestamp(i - 1));
}

TEST_CASE("degenerate market without quoters aborts with a diagnostic") {
  MarketConfig c;
  c.n_fundamental = 300;
  c.n_market_makers = 0;
  c.horizon = 900.0;
  c.seed = 1;
  c.fundamental.obs_noise_std = 0.0;
  c.fundamental.sigma = 0.2;  // strong drift so one side is consumed
  try {
    Dataset d = run_market(c);
    // Plausible to survive; when it does the book never lost a side.
    CHECK(d.size() > 0);
  } catch (const Error& e) {
    CHECK(e.code() == Errc::degenerate_market);
  }
}

TEST_CASE("market config json round-trips and rejects unknown keys") {
  MarketConfig c = small_market(9);
  std::string text = market_config_to_json_string(c);
  MarketConfig back = market_config_from_json_string(text);
  CHECK(back.n_fundamental == c.n_fundamental);
  CHECK(back.momentum_windows == c.momentum_windows);
  CHECK(back.seed == c.seed);
  CHECK_THROWS_AS((void)market_config_from_json_string("{\"horizonn\": 10}"), Error);
  CHECK_THROWS_AS((void)market_config_from_json_string("{\"horizon\": -1}"), Error);
}

// ---------------------------------------------------------------------------
// Prisoner's dilemma
// ---------------------------------------------------------------------------

TEST_CASE("defect-vs-cooperate emits balanced labels with constant actions") {
  Dataset d = run_prisoners_dilemma(PdScenario::defect_vs_cooperate, 10,
                                    PdStateMode::full, 1);
  REQUIRE(d.size() == 20);
  int defect_rows = 0, coop_rows = 0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (d.label(i) == 0) {
      CHECK(d.action(i, 0) == 1.0);
      ++defect_rows;
    } else {
      CHECK(d.action(i, 0) == 0.0);
      ++coop_rows;
    }
  }
  CHECK(defect_rows == 10);
  CHECK(coop_rows == 10);
}

TEST_CASE("flipper starts cooperate and alternates 0,1,0,1") {
  Dataset d = run_prisoners_dilemma(PdScenario::cooperate_vs_flipper, 8,
                                    PdStateMode::full, 1);
  std::vector<double> flipper_actions;
  for (std::size_t i = 0; i < d.size(); ++i)
    if (d.label(i) == 1) flipper_actions.push_back(d.action(i, 0));
  REQUIRE(flipper_actions.size() == 8);
  for (std::size_t r = 0; r < flipper_actions.size(); ++r)
    CHECK(flipper_actions[r] == (r % 2 == 0 ? 0.0 : 1.0));
}

TEST_CASE("full-state flipper rows carry the previous own action") {
  Dataset d = run_prisoners_dilemma(PdScenario::cooperate_vs_flipper, 12,
                                    PdStateMode::full, 1);
  double prev_own = -1.0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (d.label(i) != 1) continue;
    if (prev_own >= 0.0) CHECK(d.state(i, 1) == prev_own);
    prev_own = d.action(i, 0);
  }
}

TEST_CASE("null state mode emits a single constant zero feature") {
  Dataset d = run_prisoners_dilemma(PdScenario::defect_vs_cooperate, 5,
                                    PdStateMode::null_state, 1);
  CHECK(d.n_features() == 1);
  CHECK(d.schema_id() == "pd-v1");
  for (std::size_t i = 0; i < d.size(); ++i) CHECK(d.state(i, 0) == 0.0);
}

TEST_CASE("pd generation is deterministic and validates rounds") {
  TempDir dir;
  Dataset a = run_prisoners_dilemma(PdScenario::defect_vs_cooperate, 50, PdStateMode::full, 3);
  Dataset b = run_prisoners_dilemma(PdScenario::defect_vs_cooperate, 50, PdStateMode::full, 3);
  std::string pa = dir.file("a.csv"), pb = dir.file("b.csv");
  save_csv(a, pa);
  save_csv(b, pb);
  CHECK(read_file(pa) == read_file(pb));
  CHECK_THROWS_AS((void)run_prisoners_dilemma(PdScenario::defect_vs_cooperate, 1,
                                              PdStateMode::full, 0),
                  Error);
}
