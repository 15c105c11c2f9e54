#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "kshap/forest.hpp"
#include "test_util.hpp"

using namespace kshap;
using kshap::test::TempDir;

namespace {

SchemaDescriptor toy_schema(std::size_t f, std::size_t d = 1) {
  SchemaDescriptor s;
  s.id = "toy";
  for (std::size_t i = 0; i < f; ++i) s.feature_names.push_back("f" + std::to_string(i));
  for (std::size_t j = 0; j < d; ++j) s.action_names.push_back("a" + std::to_string(j));
  return s;
}

// action = state[0] exactly, with state[0] on a coarse grid so every
// bootstrap sample still contains copies of each value; deep trees memorize.
Dataset memorization_fixture(std::size_t rows, std::uint64_t seed) {
  Dataset d(toy_schema(4));
  Rng rng(seed);
  std::vector<double> s(4), a(1);
  for (std::size_t i = 0; i < rows; ++i) {
    s[0] = static_cast<double>(rng.uniform_int(20)) - 10.0;
    for (std::size_t j = 1; j < 4; ++j) s[j] = rng.uniform(-10.0, 10.0);
    a[0] = s[0];
    d.add_row(s, a);
  }
  return d;
}

double training_mse(const RandomForest& forest, const Dataset& data, std::size_t dim) {
  double se = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    double err = forest.predict_dim(data.state_row(i), dim) - data.action(i, dim);
    se += err * err;
  }
  return se / static_cast<double>(data.size());
}

// Exhaustive enumeration over every (feature, midpoint) candidate.
struct BruteSplit {
  int feature = -1;
  double threshold = 0.0;
  double child_score = -1.0;
};

BruteSplit brute_force_best_split(const Dataset& data, int min_samples_leaf) {
  BruteSplit best;
  std::size_t n = data.size();
  for (std::size_t f = 0; f < data.n_features(); ++f) {
    std::vector<double> values;
    for (std::size_t i = 0; i < n; ++i) values.push_back(data.state(i, f));
    std::vector<double> sorted = values;
    std::sort(sorted.begin(), sorted.end());
    sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
    for (std::size_t v = 1; v < sorted.size(); ++v) {
      double thr = 0.5 * (sorted[v - 1] + sorted[v]);
      double ls = 0.0, rs = 0.0;
      std::size_t ln = 0, rn = 0;
      for (std::size_t i = 0; i < n; ++i) {
        if (values[i] <= thr) {
          ls += data.action(i, 0);
          ++ln;
        } else {
          rs += data.action(i, 0);
          ++rn;
        }
      }
      if (ln < static_cast<std::size_t>(min_samples_leaf) ||
          rn < static_cast<std::size_t>(min_samples_leaf))
        continue;
      double score = ls * ls / ln + rs * rs / rn;
      if (score > best.child_score + 1e-12) best = {static_cast<int>(f), thr, score};
    }
  }
  return best;
}

}  // namespace

TEST_CASE("split_search finds the hand-enumerated best threshold") {
  // targets [0,0,10,10] on feature [1,2,3,4]: candidates 1.5, 2.5, 3.5.
  Dataset d(toy_schema(1));
  double xs[] = {1.0, 2.0, 3.0, 4.0};
  double ys[] = {0.0, 0.0, 10.0, 10.0};
  for (int i = 0; i < 4; ++i) {
    std::vector<double> s{xs[i]}, a{ys[i]};
    d.add_row(s, a);
  }
  std::vector<std::size_t> idx{0, 1, 2, 3};
  std::vector<int> subset{0};
  auto split = split_search(d.states_flat(), 1, d.actions_flat(), idx, subset, 1);
  REQUIRE(split.has_value());
  CHECK(split->feature == 0);
  CHECK(split->threshold == doctest::Approx(2.5));
  // Perfect two-cluster target: all parent SSE (=100) removed.
  CHECK(split->gain == doctest::Approx(100.0));
}

TEST_CASE("split_search returns nothing for constant features") {
  Dataset d(toy_schema(1));
  for (int i = 0; i < 6; ++i) {
    std::vector<double> s{3.0}, a{static_cast<double>(i)};
    d.add_row(s, a);
  }
  std::vector<std::size_t> idx{0, 1, 2, 3, 4, 5};
  std::vector<int> subset{0};
  CHECK_FALSE(split_search(d.states_flat(), 1, d.actions_flat(), idx, subset, 1).has_value());
}

TEST_CASE("split_search agrees with exhaustive enumeration on random data") {
  for (std::uint64_t seed = 1; seed <= 8; ++seed) {
    Dataset d(toy_schema(3));
    Rng rng(seed);
    std::vector<double> s(3), a(1);
    for (int i = 0; i < 40; ++i) {
      for (auto& v : s) v = std::round(rng.uniform(0.0, 8.0));
      a[0] = rng.uniform(-1.0, 1.0) + (s[0] > 4.0 ? 3.0 : 0.0);
      d.add_row(s, a);
    }
    std::vector<std::size_t> idx(d.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::vector<int> subset{0, 1, 2};
    auto split = split_search(d.states_flat(), 3, d.actions_flat(), idx, subset, 2);
    BruteSplit brute = brute_force_best_split(d, 2);
    REQUIRE(split.has_value());
    CHECK(split->feature == brute.feature);
    CHECK(split->threshold == doctest::Approx(brute.threshold));
  }
}

TEST_CASE("memorization fixture trains to near-zero MSE") {
  Dataset d = memorization_fixture(400, 5);
  ForestParams p;
  p.n_trees = 30;
  p.max_depth = 30;
  p.min_samples_leaf = 1;
  p.max_features = 4;
  p.seed = 1;
  RandomForest forest = RandomForest::fit(d, p);
  CHECK(training_mse(forest, d, 0) < 1e-6);
  for (std::size_t i = 0; i < 20; ++i) {
    double pred = forest.predict(d.state_row(i))[0];
    CHECK(std::abs(pred - d.action(i, 0)) < 1e-3);
  }
}

TEST_CASE("constant action column predicts the constant") {
  Dataset d(toy_schema(2));
  Rng rng(3);
  for (int i = 0; i < 50; ++i) {
    std::vector<double> s{rng.uniform(), rng.uniform()}, a{2.5};
    d.add_row(s, a);
  }
  ForestParams p;
  p.seed = 9;
  RandomForest forest = RandomForest::fit(d, p);
  for (int i = 0; i < 10; ++i) {
    std::vector<double> s{rng.uniform(), rng.uniform()};
    CHECK(forest.predict(s)[0] == doctest::Approx(2.5));
  }
  for (const Tree& t : forest.dim_trees()[0]) CHECK(t.n_nodes() == 1);
}

TEST_CASE("fit is bit-deterministic under a fixed seed") {
  Dataset d = memorization_fixture(200, 8);
  ForestParams p;
  p.n_trees = 12;
  p.seed = 77;
  RandomForest a = RandomForest::fit(d, p);
  RandomForest b = RandomForest::fit(d, p);
  CHECK(a.to_json_string() == b.to_json_string());
}

TEST_CASE("single-tree single-leaf prediction and tree averaging") {
  Tree leaf7;
  leaf7.feature = {-1};
  leaf7.threshold = {0.0};
  leaf7.left = {-1};
  leaf7.right = {-1};
  leaf7.value = {7.0};
  leaf7.cover = {10};
  std::vector<double> x{0.3};
  CHECK(leaf7.predict(x) == 7.0);

  Tree leaf2 = leaf7, leaf4 = leaf7;
  leaf2.value = {2.0};
  leaf4.value = {4.0};
  CHECK(0.5 * (leaf2.predict(x) + leaf4.predict(x)) == doctest::Approx(3.0));
}

TEST_CASE("training MSE never exceeds the action variance") {
  for (std::uint64_t seed : {1ULL, 2ULL, 3ULL}) {
    Dataset d(toy_schema(3, 2));
    Rng rng(seed);
    std::vector<double> s(3), a(2);
    for (int i = 0; i < 300; ++i) {
      for (auto& v : s) v = rng.normal();
      a[0] = s[0] * 2.0 + rng.normal() * 0.5;
      a[1] = rng.normal();
      d.add_row(s, a);
    }
    ForestParams p;
    p.seed = seed;
    RandomForest forest = RandomForest::fit(d, p);
    for (std::size_t dim = 0; dim < 2; ++dim) {
      double mean = 0.0;
      for (std::size_t i = 0; i < d.size(); ++i) mean += d.action(i, dim);
      mean /= static_cast<double>(d.size());
      double var = 0.0;
      for (std::size_t i = 0; i < d.size(); ++i) {
        double dv = d.action(i, dim) - mean;
        var += dv * dv;
      }
      var /= static_cast<double>(d.size());
      CHECK(training_mse(forest, d, dim) <= var + 1e-12);
    }
  }
}

TEST_CASE("predictions stay within the training target range") {
  Dataset d = memorization_fixture(300, 21);
  double lo = 1e9, hi = -1e9;
  for (std::size_t i = 0; i < d.size(); ++i) {
    lo = std::min(lo, d.action(i, 0));
    hi = std::max(hi, d.action(i, 0));
  }
  ForestParams p;
  p.seed = 4;
  RandomForest forest = RandomForest::fit(d, p);
  Rng rng(99);
  for (int i = 0; i < 200; ++i) {
    std::vector<double> s(4);
    for (auto& v : s) v = rng.uniform(-20.0, 20.0);  // beyond the training box
    double pred = forest.predict(s)[0];
    CHECK(pred >= lo);
    CHECK(pred <= hi);
  }
}

TEST_CASE("cover conservation holds at every internal node") {
  Dataset d = memorization_fixture(150, 13);
  ForestParams p;
  p.n_trees = 10;
  p.seed = 2;
  RandomForest forest = RandomForest::fit(d, p);
  for (const Tree& t : forest.dim_trees()[0]) {
    t.validate(4);
    CHECK(t.cover[0] == 150);  // bootstrap keeps the full sample size
  }
}

TEST_CASE("more trees do not raise out-of-bag error beyond noise") {
  Dataset d = memorization_fixture(400, 17);
  ForestParams p10;
  p10.n_trees = 10;
  p10.compute_oob = true;
  p10.seed = 3;
  ForestParams p100 = p10;
  p100.n_trees = 100;
  RandomForest f10 = RandomForest::fit(d, p10);
  RandomForest f100 = RandomForest::fit(d, p100);
  REQUIRE(f10.oob_mse().size() == 1);
  // 3-sigma allowance from the per-row squared-error spread.
  std::vector<double> errs;
  for (std::size_t i = 0; i < d.size(); ++i) {
    double pred = f10.predict(d.state_row(i))[0];
    errs.push_back(std::pow(pred - d.action(i, 0), 2));
  }
  double mean = std::accumulate(errs.begin(), errs.end(), 0.0) / errs.size();
  double sd = 0.0;
  for (double e : errs) sd += (e - mean) * (e - mean);
  sd = std::sqrt(sd / errs.size()) / std::sqrt(static_cast<double>(errs.size()));
  CHECK(f100.oob_mse()[0] <= f10.oob_mse()[0] + 3.0 * sd);
}

TEST_CASE("model JSON round-trips through save and load") {
  TempDir dir;
  Dataset d = memorization_fixture(120, 30);
  ForestParams p;
  p.n_trees = 5;
  p.seed = 6;
  RandomForest forest = RandomForest::fit(d, p);
  std::string path = dir.file("model.json");
  forest.save(path);
  RandomForest back = RandomForest::load(path);
  CHECK(back.to_json_string() == forest.to_json_string());
  Rng rng(1);
  for (int i = 0; i < 20; ++i) {
    std::vector<double> s(4);
    for (auto& v : s) v = rng.uniform(-10.0, 10.0);
    CHECK(back.predict(s)[0] == forest.predict(s)[0]);
  }
}

TEST_CASE("fit rejects empty and undersized datasets") {
  Dataset d(toy_schema(2));
  ForestParams p;
  CHECK_THROWS_AS((void)RandomForest::fit(d, p), Error);
  std::vector<double> s{1.0, 2.0}, a{0.5};
  d.add_row(s, a);
  CHECK_THROWS_AS((void)RandomForest::fit(d, p), Error);
}

TEST_CASE("predict validates dimensions") {
  Dataset d = memorization_fixture(50, 2);
  ForestParams p;
  p.n_trees = 3;
  p.seed = 1;
  RandomForest forest = RandomForest::fit(d, p);
  std::vector<double> bad{1.0, 2.0};
  CHECK_THROWS_AS((void)forest.predict(bad), Error);
}
