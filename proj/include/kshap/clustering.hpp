#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "kshap/dataset.hpp"
#include "kshap/forest.hpp"
#include "kshap/shap.hpp"

namespace kshap {

// ---------------------------------------------------------------------------
// K-Means (k-means++ init, Lloyd iterations, best-of-restarts)
// ---------------------------------------------------------------------------

struct KMeansModel {
  std::size_t k = 0;
  std::size_t dims = 0;
  std::vector<double> centroids;    // k x dims, row-major
  std::vector<int> assignments;     // nearest centroid, ties to lowest index
  double inertia = 0.0;             // within-cluster sum of squares
  int iterations_run = 0;
  std::uint64_t seed = 0;

  std::span<const double> centroid(std::size_t j) const {
    return {centroids.data() + j * dims, dims};
  }
};

KMeansModel kmeans_fit(const std::vector<double>& points, std::size_t rows,
                       std::size_t dims, std::size_t k, std::uint64_t seed,
                       int restarts = 10, int max_iterations = 300,
                       int n_threads = 0);

// Recomputed inertia from the model fields (for invariant checks).
double kmeans_inertia(const KMeansModel& model, const std::vector<double>& points,
                      std::size_t rows);

// Mean point-to-assigned-centroid euclidean distance.
double kmeans_distortion(const KMeansModel& model, const std::vector<double>& points,
                         std::size_t rows);

// ---------------------------------------------------------------------------
// Elbow selection (max second difference of the distortion curve)
// ---------------------------------------------------------------------------

struct ElbowReport {
  std::vector<int> ks;
  std::vector<double> distortions;
  std::vector<double> inertias;
  int chosen_k = 0;
  std::string rule = "max-second-difference";
  double knee_ratio = 0.0;     // largest / second-largest second difference
  bool low_confidence = false; // knee_ratio < 2
};

ElbowReport elbow_select_k(const std::vector<double>& points, std::size_t rows,
                           std::size_t dims, int k_min, int k_max, std::uint64_t seed,
                           int restarts = 10, int n_threads = 0);

// Knee selection on an externally supplied distortion curve (same rule).
ElbowReport elbow_from_curve(const std::vector<int>& ks,
                             const std::vector<double>& distortions);

// ---------------------------------------------------------------------------
// EM K-Clustering baseline: k linear ridge policies fit by alternating
// assignment and refit
// ---------------------------------------------------------------------------

struct EMKClusteringModel {
  std::size_t k = 0;
  std::size_t n_features = 0;  // state features (before intercept)
  std::size_t n_outputs = 0;
  // k policies, each (F+1) x d row-major with the intercept row last.
  std::vector<double> coefficients;
  std::vector<int> assignments;
  double total_residual = 0.0;
  int iterations_run = 0;
  int restarts_used = 0;
  FeatureScaler scaler;  // states are standardized internally

  std::span<const double> policy(std::size_t j) const {
    std::size_t stride = (n_features + 1) * n_outputs;
    return {coefficients.data() + j * stride, stride};
  }
};

EMKClusteringModel em_k_clustering(const Dataset& dataset, std::size_t k,
                                   std::uint64_t seed, int restarts = 10,
                                   int max_iterations = 100);

// ---------------------------------------------------------------------------
// End-to-end K-SHAP pipeline (fit world-policy -> explain -> cluster)
// ---------------------------------------------------------------------------

struct PipelineOptions {
  int k = 0;                    // 0 = choose with the elbow method
  int elbow_k_min = 2;
  int elbow_k_max = 6;
  ForestParams forest;          // forest.seed is overridden by the master seed fork
  std::size_t background_size = 100;
  int restarts = 10;
  int action_dim = -1;          // cluster one action dimension only; -1 = all
  std::uint64_t seed = 0;
  int n_threads = 0;
};

struct PipelineResult {
  RandomForest forest;
  Background background;
  ShapMatrix shap;
  std::optional<ElbowReport> elbow;
  KMeansModel kmeans;
  std::vector<int> labels;  // cluster assignment per input row
};

PipelineResult kshap_pipeline(const Dataset& dataset, const PipelineOptions& options);

// Raw-space baseline: standardized state++action rows (T x (F+d)).
std::vector<double> state_action_matrix(const Dataset& dataset, bool standardize = true);

}  // namespace kshap
