#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kshap/dataset.hpp"

namespace kshap {

// ---------------------------------------------------------------------------
// CART regression trees with node covers retained for TreeSHAP
// ---------------------------------------------------------------------------

struct Tree {
  // Flat node storage, root at index 0. feature[i] == -1 marks a leaf.
  std::vector<std::int32_t> feature;
  std::vector<double> threshold;  // route left when x[feature] <= threshold
  std::vector<std::int32_t> left;
  std::vector<std::int32_t> right;
  std::vector<double> value;  // leaf prediction (training-target mean)
  std::vector<std::uint32_t> cover;

  std::size_t n_nodes() const { return feature.size(); }
  bool is_leaf(std::size_t i) const { return feature[i] < 0; }

  double predict(std::span<const double> x) const {
    std::size_t i = 0;
    while (feature[i] >= 0)
      i = x[feature[i]] <= threshold[i] ? left[i] : right[i];
    return value[i];
  }

  int depth() const;
  // Checks cover conservation and bounds; throws on violation.
  void validate(std::size_t n_features) const;
};

struct ForestParams {
  int n_trees = 100;
  int max_depth = 16;
  int min_samples_leaf = 5;
  int max_features = 0;  // 0 resolves to ceil(sqrt(F))
  bool compute_oob = false;
  std::uint64_t seed = 0;

  int resolved_max_features(std::size_t n_features) const;
  void validate() const;
};

// ---------------------------------------------------------------------------
// Split search
// ---------------------------------------------------------------------------

struct Split {
  int feature = -1;
  double threshold = 0.0;
  double gain = 0.0;  // SSE reduction versus the unsplit node
};

// Best (feature, threshold) by MSE reduction over midpoint thresholds within
// the given feature subset. Ties break to the lowest feature index, then the
// lowest threshold. nullopt when no valid split exists.
std::optional<Split> split_search(std::span<const double> states, std::size_t n_features,
                                  std::span<const double> targets,
                                  std::span<const std::size_t> sample_indices,
                                  std::span<const int> feature_subset,
                                  int min_samples_leaf);

// ---------------------------------------------------------------------------
// Random forest world-policy: one bagged ensemble per action dimension
// ---------------------------------------------------------------------------

class RandomForest {
 public:
  RandomForest() = default;

  static RandomForest fit(const Dataset& dataset, const ForestParams& params);

  std::size_t n_features() const { return feature_names_.size(); }
  std::size_t n_outputs() const { return dims_.size(); }
  const ForestParams& params() const { return params_; }
  const std::vector<std::string>& feature_names() const { return feature_names_; }
  const std::vector<std::string>& action_names() const { return action_names_; }
  const std::vector<std::vector<Tree>>& dim_trees() const { return dims_; }
  const std::vector<double>& oob_mse() const { return oob_mse_; }

  std::vector<double> predict(std::span<const double> state) const;
  void predict_into(std::span<const double> state, std::span<double> out) const;
  double predict_dim(std::span<const double> state, std::size_t dim) const;

  // T x d predictions, row-major; parallel over rows.
  std::vector<double> predict_batch(const Dataset& dataset, int n_threads = 0) const;

  std::string to_json_string() const;
  static RandomForest from_json_string(const std::string& text);
  void save(const std::string& path) const;
  static RandomForest load(const std::string& path);

 private:
  ForestParams params_;
  std::vector<std::string> feature_names_;
  std::vector<std::string> action_names_;
  std::vector<std::vector<Tree>> dims_;  // [action dim][tree]
  std::vector<double> oob_mse_;          // per dim, empty unless computed
};

inline RandomForest fit_forest(const Dataset& dataset, const ForestParams& params) {
  return RandomForest::fit(dataset, params);
}

}  // namespace kshap
