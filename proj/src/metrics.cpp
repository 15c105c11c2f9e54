#include "kshap/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

#include <Eigen/Dense>

namespace kshap {

namespace {

constexpr std::uint64_t kUtilitySplitStream = 0x0717;
constexpr std::uint64_t kUtilityFitStream = 0xF17;

std::vector<int> remap_ids(const std::vector<int>& ids, std::size_t& n_distinct) {
  std::map<int, int> lookup;
  std::vector<int> out(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    auto [it, inserted] = lookup.try_emplace(ids[i], static_cast<int>(lookup.size()));
    out[i] = it->second;
  }
  n_distinct = lookup.size();
  return out;
}

double comb2(double n) { return n * (n - 1.0) / 2.0; }

}  // namespace

// ---------------------------------------------------------------------------
// Contingency + label metrics
// ---------------------------------------------------------------------------

ContingencyTable contingency_table(const std::vector<int>& pred,
                                   const std::vector<int>& truth) {
  if (pred.size() != truth.size())
    throw Error(Errc::length_mismatch, "pred has " + std::to_string(pred.size()) +
                                           " entries, truth has " +
                                           std::to_string(truth.size()));
  ContingencyTable table;
  std::vector<int> p = remap_ids(pred, table.n_pred);
  std::vector<int> t = remap_ids(truth, table.n_truth);
  table.counts.assign(table.n_pred * table.n_truth, 0);
  for (std::size_t i = 0; i < p.size(); ++i)
    ++table.counts[p[i] * table.n_truth + t[i]];
  table.total = static_cast<long long>(p.size());
  return table;
}

double purity(const std::vector<int>& pred, const std::vector<int>& truth) {
  ContingencyTable table = contingency_table(pred, truth);
  if (table.total < 1) throw Error(Errc::empty_dataset, "purity needs T >= 1");
  long long sum = 0;
  for (std::size_t i = 0; i < table.n_pred; ++i) {
    long long best = 0;
    for (std::size_t j = 0; j < table.n_truth; ++j)
      best = std::max(best, table.at(i, j));
    sum += best;
  }
  return static_cast<double>(sum) / static_cast<double>(table.total);
}

double ari(const std::vector<int>& pred, const std::vector<int>& truth) {
  ContingencyTable table = contingency_table(pred, truth);
  if (table.total < 2) throw Error(Errc::too_few_points, "ARI needs T >= 2");

  std::vector<long long> a(table.n_pred, 0), b(table.n_truth, 0);
  for (std::size_t i = 0; i < table.n_pred; ++i)
    for (std::size_t j = 0; j < table.n_truth; ++j) {
      a[i] += table.at(i, j);
      b[j] += table.at(i, j);
    }

  double index = 0.0;
  for (long long c : table.counts) index += comb2(static_cast<double>(c));
  double sum_a = 0.0, sum_b = 0.0;
  for (long long v : a) sum_a += comb2(static_cast<double>(v));
  for (long long v : b) sum_b += comb2(static_cast<double>(v));
  double expected = sum_a * sum_b / comb2(static_cast<double>(table.total));
  double max_index = 0.5 * (sum_a + sum_b);

  double denom = max_index - expected;
  if (denom == 0.0) {
    // Both partitions all-singletons or both single-cluster: identical
    // partitions score 1, anything else 0.
    bool identical = true;
    for (std::size_t i = 0; i < pred.size() && identical; ++i)
      for (std::size_t j = i + 1; j < pred.size() && identical; ++j)
        identical = (pred[i] == pred[j]) == (truth[i] == truth[j]);
    return identical ? 1.0 : 0.0;
  }
  return (index - expected) / denom;
}

double nmi(const std::vector<int>& pred, const std::vector<int>& truth) {
  ContingencyTable table = contingency_table(pred, truth);
  if (table.total < 1) throw Error(Errc::empty_dataset, "NMI needs T >= 1");
  const double n = static_cast<double>(table.total);

  std::vector<long long> a(table.n_pred, 0), b(table.n_truth, 0);
  for (std::size_t i = 0; i < table.n_pred; ++i)
    for (std::size_t j = 0; j < table.n_truth; ++j) {
      a[i] += table.at(i, j);
      b[j] += table.at(i, j);
    }
  bool identical_partitions = true;
  for (std::size_t i = 0; i < table.n_pred && identical_partitions; ++i) {
    long long row_max = 0, row_sum = 0;
    for (std::size_t j = 0; j < table.n_truth; ++j) {
      row_max = std::max(row_max, table.at(i, j));
      row_sum += table.at(i, j);
    }
    identical_partitions = row_max == row_sum;
  }
  identical_partitions = identical_partitions && table.n_pred == table.n_truth;
  if (identical_partitions) return 1.0;

  auto entropy = [&](const std::vector<long long>& counts) {
    double h = 0.0;
    for (long long c : counts) {
      if (c == 0) continue;
      double p = static_cast<double>(c) / n;
      h -= p * std::log(p);
    }
    return h;
  };
  double h_pred = entropy(a), h_truth = entropy(b);
  if (h_pred == 0.0 || h_truth == 0.0) return 0.0;

  double mi = 0.0;
  for (std::size_t i = 0; i < table.n_pred; ++i)
    for (std::size_t j = 0; j < table.n_truth; ++j) {
      long long c = table.at(i, j);
      if (c == 0) continue;
      double pij = static_cast<double>(c) / n;
      mi += pij * std::log(pij * n * n /
                           (static_cast<double>(a[i]) * static_cast<double>(b[j])));
    }
  double value = mi / (0.5 * (h_pred + h_truth));
  return std::clamp(value, 0.0, 1.0);
}

// ---------------------------------------------------------------------------
// Silhouette
// ---------------------------------------------------------------------------

double silhouette(const std::vector<double>& points, std::size_t rows, std::size_t dims,
                  const std::vector<int>& pred, int n_threads) {
  if (pred.size() != rows)
    throw Error(Errc::length_mismatch, "assignment length does not match row count");
  std::size_t k = 0;
  std::vector<int> labels = remap_ids(pred, k);
  if (k < 2) throw Error(Errc::single_cluster, "silhouette needs at least 2 clusters");

  std::vector<std::size_t> sizes(k, 0);
  for (int l : labels) ++sizes[l];

  using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Eigen::Map<const RowMatrix> x(points.data(), rows, dims);
  Eigen::VectorXd sq = x.rowwise().squaredNorm();

  // Per-point sum of distances to each cluster, computed in GEMM blocks.
  std::vector<double> cluster_dist(rows * k, 0.0);
  constexpr std::size_t kBlock = 128;
  std::size_t n_blocks = (rows + kBlock - 1) / kBlock;
  parallel_for(n_blocks, n_threads, [&](std::size_t blk) {
    std::size_t lo = blk * kBlock;
    std::size_t hi = std::min(rows, lo + kBlock);
    RowMatrix dots = x.middleRows(lo, hi - lo) * x.transpose();  // (hi-lo) x rows
    for (std::size_t i = lo; i < hi; ++i) {
      double* acc = cluster_dist.data() + i * k;
      const double sqi = sq(static_cast<Eigen::Index>(i));
      for (std::size_t j = 0; j < rows; ++j) {
        double d2 = sqi + sq(static_cast<Eigen::Index>(j)) -
                    2.0 * dots(static_cast<Eigen::Index>(i - lo),
                               static_cast<Eigen::Index>(j));
        acc[labels[j]] += std::sqrt(std::max(0.0, d2));
      }
    }
  });

  double total = 0.0;
  for (std::size_t i = 0; i < rows; ++i) {
    int own = labels[i];
    if (sizes[own] <= 1) continue;  // singleton convention: contributes 0
    double b = cluster_dist[i * k + own] / static_cast<double>(sizes[own] - 1);
    double c = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k; ++j) {
      if (static_cast<int>(j) == own) continue;
      c = std::min(c, cluster_dist[i * k + j] / static_cast<double>(sizes[j]));
    }
    double denom = std::max(b, c);
    if (denom > 0.0) total += (c - b) / denom;
  }
  return total / static_cast<double>(rows);
}

// ---------------------------------------------------------------------------
// Utility
// ---------------------------------------------------------------------------

UtilityResult utility(const Dataset& dataset, const std::vector<int>& pred,
                      const UtilityParams& params, std::uint64_t seed) {
  if (pred.size() != dataset.size())
    throw Error(Errc::length_mismatch, "assignment length does not match dataset size");
  if (dataset.size() < 8)
    throw Error(Errc::too_few_points, "utility needs a meaningful held-out split");

  std::size_t k = 0;
  std::vector<int> labels = remap_ids(pred, k);

  auto [train_idx, test_idx] = split_indices(
      dataset.size(), 1.0 - params.holdout_fraction, mix64(seed, kUtilitySplitStream));

  ForestParams fit_params;
  fit_params.n_trees = params.n_trees;
  fit_params.max_depth = params.max_depth;
  fit_params.min_samples_leaf = params.min_samples_leaf;
  // The same fit seed everywhere: with k = 1 the cluster model sees exactly
  // the global training set and reproduces the global model, making the
  // utility 0 by construction.
  fit_params.seed = mix64(seed, kUtilityFitStream);

  Dataset train = dataset.gather(train_idx);
  RandomForest global = RandomForest::fit(train, fit_params);

  const std::size_t min_rows = dataset.n_features() + 1;
  UtilityResult result;
  std::vector<const RandomForest*> cluster_models(k, nullptr);
  std::vector<RandomForest> owned;
  owned.reserve(k);
  for (std::size_t c = 0; c < k; ++c) {
    std::vector<std::size_t> members;
    for (std::size_t idx : train_idx)
      if (labels[idx] == static_cast<int>(c)) members.push_back(idx);
    if (members.size() < std::max<std::size_t>(min_rows, 2)) {
      cluster_models[c] = &global;
      ++result.fallback_clusters;
      continue;
    }
    owned.push_back(RandomForest::fit(dataset.gather(members), fit_params));
    cluster_models[c] = &owned.back();
  }

  double sum = 0.0;
  std::vector<double> yhat(dataset.n_actions()), ybar(dataset.n_actions());
  for (std::size_t idx : test_idx) {
    auto s = dataset.state_row(idx);
    auto a = dataset.action_row(idx);
    global.predict_into(s, yhat);
    cluster_models[labels[idx]]->predict_into(s, ybar);
    double e_hat = 0.0, e_bar = 0.0;
    for (std::size_t j = 0; j < a.size(); ++j) {
      double dh = yhat[j] - a[j];
      double db = ybar[j] - a[j];
      e_hat += dh * dh;
      e_bar += db * db;
    }
    if (e_hat < 1e-12) {
      ++result.skipped;
      continue;
    }
    sum += (e_hat - e_bar) / e_hat;
    ++result.evaluated;
  }
  result.value = result.evaluated > 0 ? sum / static_cast<double>(result.evaluated) : 0.0;
  return result;
}

}  // namespace kshap
