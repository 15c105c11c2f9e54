#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "kshap/metrics.hpp"

using namespace kshap;

namespace {

// Brute-force oracles on raw partitions.
double purity_oracle(const std::vector<int>& pred, const std::vector<int>& truth) {
  std::map<int, std::map<int, int>> clusters;
  for (std::size_t i = 0; i < pred.size(); ++i) ++clusters[pred[i]][truth[i]];
  double sum = 0.0;
  for (const auto& [c, hist] : clusters) {
    int best = 0;
    for (const auto& [l, n] : hist) best = std::max(best, n);
    sum += best;
  }
  return sum / static_cast<double>(pred.size());
}

// Pair-counting ARI: enumerate all C(T,2) pairs.
double ari_oracle(const std::vector<int>& pred, const std::vector<int>& truth) {
  const std::size_t n = pred.size();
  double a = 0, b = 0, c = 0, d = 0;  // same-same, same-diff, diff-same, diff-diff
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      bool sp = pred[i] == pred[j];
      bool st = truth[i] == truth[j];
      if (sp && st) ++a;
      else if (sp && !st) ++b;
      else if (!sp && st) ++c;
      else ++d;
    }
  double total = a + b + c + d;
  double expected = (a + b) * (a + c) / total;
  double max_index = 0.5 * ((a + b) + (a + c));
  double denom = max_index - expected;
  if (denom == 0.0) {
    bool identical = b == 0 && c == 0;
    return identical ? 1.0 : 0.0;
  }
  return (a - expected) / denom;
}

// Entropy-from-counts NMI oracle.
double nmi_oracle(const std::vector<int>& pred, const std::vector<int>& truth) {
  const double n = static_cast<double>(pred.size());
  std::map<int, double> pa, pb;
  std::map<std::pair<int, int>, double> pj;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    pa[pred[i]] += 1.0;
    pb[truth[i]] += 1.0;
    pj[{pred[i], truth[i]}] += 1.0;
  }
  // Identical partitions
  bool identical = pa.size() == pb.size();
  if (identical) {
    std::map<int, int> image;
    for (const auto& [key, cnt] : pj) {
      auto it = image.find(key.first);
      if (it == image.end())
        image[key.first] = key.second;
      else if (it->second != key.second)
        identical = false;
    }
  }
  if (identical) return 1.0;
  auto entropy = [&](const std::map<int, double>& p) {
    double h = 0.0;
    for (const auto& [k, cnt] : p) h -= (cnt / n) * std::log(cnt / n);
    return h;
  };
  double ha = entropy(pa), hb = entropy(pb);
  if (ha == 0.0 || hb == 0.0) return 0.0;
  double mi = 0.0;
  for (const auto& [key, cnt] : pj)
    mi += (cnt / n) * std::log(cnt * n / (pa[key.first] * pb[key.second]));
  return std::clamp(mi / (0.5 * (ha + hb)), 0.0, 1.0);
}

std::vector<double> blob_points(const std::vector<std::vector<double>>& centers,
                                std::size_t per_blob, double sigma, std::uint64_t seed,
                                std::vector<int>* labels = nullptr) {
  Rng rng(seed);
  std::vector<double> pts;
  for (std::size_t c = 0; c < centers.size(); ++c)
    for (std::size_t i = 0; i < per_blob; ++i) {
      for (double v : centers[c]) pts.push_back(v + sigma * rng.normal());
      if (labels) labels->push_back(static_cast<int>(c));
    }
  return pts;
}

SchemaDescriptor toy_schema(std::size_t f, std::size_t d) {
  SchemaDescriptor s;
  s.id = "toy";
  for (std::size_t i = 0; i < f; ++i) s.feature_names.push_back("f" + std::to_string(i));
  for (std::size_t j = 0; j < d; ++j) s.action_names.push_back("a" + std::to_string(j));
  return s;
}

// Two linear policies sharing a slope but offset by +-1 over a discrete
// state grid, plus one unpredictable action dimension. Per-cluster fits
// provably remove the offset variance, the grid bounds the tree partition so
// both policy fits saturate, and the noise dimension keeps the per-row
// denominators away from zero.
Dataset planted_policies(std::size_t rows_per_policy, double noise, std::uint64_t seed,
                         std::vector<int>* truth = nullptr) {
  Dataset d(toy_schema(2, 2));
  Rng rng(seed);
  const double intercept[2] = {1.0, -1.0};
  std::vector<double> s(2), a(2);
  for (int policy = 0; policy < 2; ++policy)
    for (std::size_t i = 0; i < rows_per_policy; ++i) {
      s[0] = static_cast<double>(rng.uniform_int(3)) - 1.0;
      s[1] = rng.uniform_int(2) ? 1.0 : -1.0;
      a[0] = intercept[policy] + s[0] + noise * rng.normal();
      a[1] = rng.normal();
      d.add_row(s, a);
      if (truth) truth->push_back(policy);
    }
  return d;
}

}  // namespace

// ---------------------------------------------------------------------------
// Worked fixtures
// ---------------------------------------------------------------------------

TEST_CASE("purity worked example: clusters {A,A,B} and {B,B} score 0.8") {
  std::vector<int> pred{0, 0, 0, 1, 1};
  std::vector<int> truth{0, 0, 1, 1, 1};
  CHECK(purity(pred, truth) == doctest::Approx(0.8));
}

TEST_CASE("purity of a perfect and a constant clustering") {
  std::vector<int> truth{0, 1, 0, 1, 1, 0};
  CHECK(purity(truth, truth) == 1.0);
  std::vector<int> relabeled{2, 5, 2, 5, 5, 2};
  CHECK(purity(relabeled, truth) == 1.0);
  std::vector<int> constant{0, 0, 0, 0, 0, 0};
  CHECK(purity(constant, truth) == doctest::Approx(0.5));
}

TEST_CASE("ari worked fixtures") {
  std::vector<int> same{0, 0, 1, 1};
  CHECK(ari(same, same) == 1.0);
  std::vector<int> swapped{1, 1, 0, 0};
  CHECK(ari(same, swapped) == 1.0);
  std::vector<int> cross{0, 1, 0, 1};
  CHECK(ari(same, cross) == doctest::Approx(ari_oracle(same, cross)));
}

TEST_CASE("nmi worked fixtures") {
  std::vector<int> same{0, 0, 1, 1};
  CHECK(nmi(same, same) == 1.0);
  std::vector<int> constant{0, 0, 0, 0};
  std::vector<int> balanced{0, 0, 1, 1};
  CHECK(nmi(constant, balanced) == 0.0);
  std::vector<int> cross{0, 1, 0, 1};
  CHECK(nmi(balanced, cross) == doctest::Approx(nmi_oracle(balanced, cross)));
}

TEST_CASE("metrics match brute-force oracles on 200 random partitions") {
  Rng rng(2024);
  for (int trial = 0; trial < 200; ++trial) {
    std::size_t t = 2 + rng.uniform_int(11);  // 2..12
    std::vector<int> pred(t), truth(t);
    std::size_t kp = 1 + rng.uniform_int(4);
    std::size_t kt = 1 + rng.uniform_int(4);
    for (std::size_t i = 0; i < t; ++i) {
      pred[i] = static_cast<int>(rng.uniform_int(kp));
      truth[i] = static_cast<int>(rng.uniform_int(kt));
    }
    CHECK(std::abs(purity(pred, truth) - purity_oracle(pred, truth)) <= 1e-12);
    CHECK(std::abs(ari(pred, truth) - ari_oracle(pred, truth)) <= 1e-12);
    CHECK(std::abs(nmi(pred, truth) - nmi_oracle(pred, truth)) <= 1e-12);
  }
}

TEST_CASE("relabeling invariance of purity, ari and nmi") {
  Rng rng(7);
  std::vector<int> pred(40), truth(40);
  for (std::size_t i = 0; i < 40; ++i) {
    pred[i] = static_cast<int>(rng.uniform_int(4));
    truth[i] = static_cast<int>(rng.uniform_int(3));
  }
  std::vector<int> pred_relabeled(40), truth_relabeled(40);
  int pred_map[4] = {2, 0, 3, 1};
  int truth_map[3] = {1, 2, 0};
  for (std::size_t i = 0; i < 40; ++i) {
    pred_relabeled[i] = pred_map[pred[i]];
    truth_relabeled[i] = truth_map[truth[i]];
  }
  CHECK(purity(pred, truth) == purity(pred_relabeled, truth_relabeled));
  CHECK(ari(pred, truth) == doctest::Approx(ari(pred_relabeled, truth_relabeled)));
  CHECK(nmi(pred, truth) == doctest::Approx(nmi(pred_relabeled, truth_relabeled)));
}

TEST_CASE("ari of independent partitions averages zero") {
  Rng rng(99);
  double sum = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<int> pred(1000), truth(1000);
    for (std::size_t i = 0; i < 1000; ++i) {
      pred[i] = static_cast<int>(rng.uniform_int(3));
      truth[i] = static_cast<int>(rng.uniform_int(3));
    }
    sum += ari(pred, truth);
  }
  CHECK(std::abs(sum / 100.0) < 0.05);
}

TEST_CASE("length mismatches are rejected") {
  std::vector<int> a{0, 1}, b{0, 1, 2};
  CHECK_THROWS_AS((void)purity(a, b), Error);
  CHECK_THROWS_AS((void)ari(a, b), Error);
  CHECK_THROWS_AS((void)nmi(a, b), Error);
}

// ---------------------------------------------------------------------------
// Silhouette
// ---------------------------------------------------------------------------

TEST_CASE("tight far-apart blobs score a high silhouette") {
  std::vector<int> labels;
  std::vector<double> pts = blob_points({{0.0, 0.0}, {50.0, 50.0}}, 60, 0.5, 3, &labels);
  double s = silhouette(pts, 120, 2, labels);
  CHECK(s > 0.9);
}

TEST_CASE("random assignment on mixed blobs scores near zero") {
  std::vector<double> pts = blob_points({{0.0, 0.0}, {4.0, 4.0}}, 100, 1.0, 5);
  double total = 0.0;
  int trials = 20;
  for (int t = 0; t < trials; ++t) {
    Rng rng(100 + t);
    std::vector<int> labels(200);
    for (auto& l : labels) l = static_cast<int>(rng.uniform_int(2));
    total += silhouette(pts, 200, 2, labels);
  }
  CHECK(std::abs(total / trials) <= 0.05);
}

TEST_CASE("two singleton clusters score zero by convention") {
  std::vector<double> pts{0.0, 0.0, 5.0, 5.0};
  std::vector<int> labels{0, 1};
  CHECK(silhouette(pts, 2, 2, labels) == 0.0);
}

TEST_CASE("silhouette is invariant under isometries") {
  std::vector<int> labels;
  std::vector<double> pts = blob_points({{0.0, 0.0}, {6.0, 1.0}}, 40, 0.7, 11, &labels);
  double base = silhouette(pts, 80, 2, labels);
  // Rotate by 30 degrees and translate.
  double c = std::cos(0.5235987755982988), s = std::sin(0.5235987755982988);
  std::vector<double> moved(pts.size());
  for (std::size_t i = 0; i < 80; ++i) {
    double x = pts[i * 2], y = pts[i * 2 + 1];
    moved[i * 2] = c * x - s * y + 100.0;
    moved[i * 2 + 1] = s * x + c * y - 40.0;
  }
  CHECK(silhouette(moved, 80, 2, labels) == doctest::Approx(base).epsilon(1e-9));
}

TEST_CASE("silhouette needs two clusters and matching lengths") {
  std::vector<double> pts{0.0, 1.0, 2.0, 3.0};
  std::vector<int> one{0, 0};
  CHECK_THROWS_AS((void)silhouette(pts, 2, 2, one), Error);
  std::vector<int> wrong{0};
  CHECK_THROWS_AS((void)silhouette(pts, 2, 2, wrong), Error);
}

TEST_CASE("silhouette is independent of the thread count") {
  std::vector<int> labels;
  std::vector<double> pts = blob_points({{0.0, 0.0}, {3.0, 3.0}, {9.0, 0.0}}, 70, 1.0,
                                        17, &labels);
  double serial = silhouette(pts, 210, 2, labels, 1);
  double parallel = silhouette(pts, 210, 2, labels, 8);
  CHECK(serial == parallel);
}

// ---------------------------------------------------------------------------
// Utility
// ---------------------------------------------------------------------------

TEST_CASE("single-cluster utility is exactly zero") {
  Dataset d = planted_policies(300, 0.05, 3);
  std::vector<int> one(d.size(), 0);
  UtilityResult r = utility(d, one, UtilityParams{}, 7);
  CHECK(r.value == 0.0);
  CHECK(r.evaluated > 0);
}

TEST_CASE("ground-truth clusters on planted policies give a large utility") {
  std::vector<int> truth;
  Dataset d = planted_policies(600, 0.01, 5, &truth);
  UtilityResult r = utility(d, truth, UtilityParams{}, 11);
  CHECK(r.value > 0.3);
}

TEST_CASE("random clusters keep utility near zero over 20 seeds") {
  std::vector<int> truth;
  Dataset d = planted_policies(600, 0.01, 9, &truth);
  double sum = 0.0;
  for (int t = 0; t < 20; ++t) {
    Rng rng(400 + t);
    std::vector<int> labels(d.size());
    for (auto& l : labels) l = static_cast<int>(rng.uniform_int(2));
    sum += utility(d, labels, UtilityParams{}, 1000 + t).value;
  }
  CHECK(std::abs(sum / 20.0) <= 0.05);
}

TEST_CASE("tiny clusters fall back to the global model") {
  std::vector<int> truth;
  Dataset d = planted_policies(100, 0.05, 13, &truth);
  std::vector<int> labels = truth;
  labels[0] = 2;  // a near-empty third cluster
  UtilityResult r = utility(d, labels, UtilityParams{}, 3);
  CHECK(r.fallback_clusters >= 1);
}

TEST_CASE("utility validates lengths") {
  Dataset d = planted_policies(50, 0.05, 1);
  std::vector<int> wrong(3, 0);
  CHECK_THROWS_AS((void)utility(d, wrong, UtilityParams{}, 1), Error);
}
