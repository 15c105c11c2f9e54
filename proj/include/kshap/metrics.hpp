#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "kshap/dataset.hpp"
#include "kshap/forest.hpp"

namespace kshap {

// ---------------------------------------------------------------------------
// Label-based clustering metrics
// ---------------------------------------------------------------------------

struct ContingencyTable {
  std::size_t n_pred = 0;   // clusters
  std::size_t n_truth = 0;  // ground-truth labels
  std::vector<long long> counts;  // n_pred x n_truth, row-major
  long long total = 0;

  long long at(std::size_t i, std::size_t j) const { return counts[i * n_truth + j]; }
};

ContingencyTable contingency_table(const std::vector<int>& pred,
                                   const std::vector<int>& truth);

// purity(Omega, C) = (1/N) sum_k max_j |Omega_k n C_j|
double purity(const std::vector<int>& pred, const std::vector<int>& truth);

// Adjusted Rand Index; 1.0 when the denominator vanishes and the partitions
// are identical, 0.0 otherwise.
double ari(const std::vector<int>& pred, const std::vector<int>& truth);

// Normalized mutual information with arithmetic-mean normalization and
// natural logs.
double nmi(const std::vector<int>& pred, const std::vector<int>& truth);

// ---------------------------------------------------------------------------
// Geometry-based: silhouette (exact pairwise euclidean; singletons score 0)
// ---------------------------------------------------------------------------

double silhouette(const std::vector<double>& points, std::size_t rows, std::size_t dims,
                  const std::vector<int>& pred, int n_threads = 0);

// ---------------------------------------------------------------------------
// Task-based: utility (relative held-out error reduction of per-cluster
// policies over a single global policy of the same family)
// ---------------------------------------------------------------------------

struct UtilityParams {
  int n_trees = 25;
  int max_depth = 8;
  // Wide leaves keep the policy fits smooth, so the per-row denominator
  // errors stay bounded away from zero.
  int min_samples_leaf = 25;
  double holdout_fraction = 0.25;
};

struct UtilityResult {
  double value = 0.0;
  std::size_t skipped = 0;            // held-out rows with near-zero global error
  std::size_t evaluated = 0;
  std::size_t fallback_clusters = 0;  // clusters trained on the global model instead
};

UtilityResult utility(const Dataset& dataset, const std::vector<int>& pred,
                      const UtilityParams& params, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Run report
// ---------------------------------------------------------------------------

struct ClusteringReport {
  std::optional<double> purity;
  std::optional<double> ari;
  std::optional<double> nmi;
  std::optional<double> silhouette;
  std::optional<double> utility;
  int k = 0;
  std::size_t T = 0;
  std::uint64_t seed = 0;
  std::string algorithm;
  double timing_seconds = 0.0;  // logged to stderr, never serialized
  ContingencyTable contingency;
};

}  // namespace kshap
