#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "kshap/forest.hpp"

namespace kshap {

// ---------------------------------------------------------------------------
// Interventional background sample
// ---------------------------------------------------------------------------

struct Background {
  std::vector<double> data;  // rows x cols, row-major
  std::size_t rows = 0;
  std::size_t cols = 0;

  std::span<const double> row(std::size_t i) const { return {data.data() + i * cols, cols}; }
};

// Seeded uniform subsample (without replacement) of the dataset's states,
// kept in ascending row order. size >= T keeps every row.
Background make_background(const Dataset& dataset, std::size_t size, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Explanations
// ---------------------------------------------------------------------------

struct ShapExplanation {
  std::size_t n_features = 0;
  std::size_t n_outputs = 0;
  std::vector<double> phi0;  // d base values
  std::vector<double> phi;   // F x d, feature-major: phi[f * d + j]

  double at(std::size_t feature, std::size_t dim) const {
    return phi[feature * n_outputs + dim];
  }
  // Row-major (feature-major) F*d vector, same layout as stored.
  const std::vector<double>& flattened() const { return phi; }
};

struct ShapMatrix {
  std::size_t rows = 0;
  std::size_t n_features = 0;
  std::size_t n_outputs = 0;
  std::vector<double> phi0;    // d base values (constant across rows)
  std::vector<double> values;  // rows x (F * d), feature-major per row
  std::vector<std::string> feature_names;
  std::vector<std::string> action_names;

  std::size_t dims() const { return n_features * n_outputs; }
  std::span<const double> row(std::size_t i) const {
    return {values.data() + i * dims(), dims()};
  }
  // Column slice for one action dimension (rows x F).
  std::vector<double> action_dim_slice(std::size_t dim) const;
};

// ---------------------------------------------------------------------------
// Engines
// ---------------------------------------------------------------------------

using PredictFn = std::function<void(std::span<const double>, std::span<double>)>;

// Brute-force exact Shapley values by subset enumeration (2^F coalition
// evaluations per background row). Oracle use only; F must be <= 15.
ShapExplanation exact_shap(const PredictFn& model, std::size_t n_outputs,
                           std::span<const double> x, const Background& background);

// Interventional TreeSHAP by recursive path traversal; equals exact_shap of
// the same forest up to floating-point rounding.
ShapExplanation tree_shap(const RandomForest& forest, std::span<const double> x,
                          const Background& background);

// Row-parallel explanation of a whole dataset; output is identical for any
// parallelism degree.
ShapMatrix explain_dataset(const RandomForest& forest, const Dataset& dataset,
                           const Background& background, int n_threads = 0);

// shap.csv round-trip: columns <feature>__<action> (feature-major), then
// phi0__<action>, then pass-through label/agent_id columns when present.
void save_shap_csv(const ShapMatrix& shap, const Dataset& dataset, const std::string& path);
struct LoadedShap {
  ShapMatrix matrix;
  std::vector<int> labels;  // empty when the file has no label column
};
LoadedShap load_shap_csv(const std::string& path);

}  // namespace kshap
