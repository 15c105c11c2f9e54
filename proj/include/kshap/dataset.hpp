#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kshap/common.hpp"

namespace kshap {

// ---------------------------------------------------------------------------
// Schema
// ---------------------------------------------------------------------------

struct SchemaDescriptor {
  std::string id;
  std::vector<std::string> feature_names;
  std::vector<std::string> action_names;
  // Indices into action_names for columns with value constraints; -1 = none.
  int size_index = -1;       // integer >= 1
  int direction_index = -1;  // exactly 0 or 1
  bool binary_actions = false;  // every action entry in {0, 1}
};

// Built-in schemas: "market-v1", "pd-v1". Throws SchemaMismatch for unknown ids.
const SchemaDescriptor& builtin_schema(const std::string& id);
// The single-constant-feature variant emitted by the null-state PD scenarios.
const SchemaDescriptor& pd_null_schema();
std::vector<std::string> builtin_schema_ids();

// ---------------------------------------------------------------------------
// Observations
// ---------------------------------------------------------------------------

struct Observation {
  std::vector<double> state;
  std::vector<double> action;
  std::optional<int> label;
  std::optional<std::int64_t> agent_id;
  std::optional<std::int64_t> timestamp;  // nanoseconds since open
};

// Column-typed collection of anonymous state-action pairs. Rows are stored
// flat; the object is immutable after construction by convention and safe to
// share across threads.
class Dataset {
 public:
  Dataset() = default;
  explicit Dataset(SchemaDescriptor schema) : schema_(std::move(schema)) {}

  std::size_t size() const { return rows_; }
  std::size_t n_features() const { return schema_.feature_names.size(); }
  std::size_t n_actions() const { return schema_.action_names.size(); }

  const SchemaDescriptor& schema() const { return schema_; }
  const std::string& schema_id() const { return schema_.id; }
  const std::vector<std::string>& feature_names() const { return schema_.feature_names; }
  const std::vector<std::string>& action_names() const { return schema_.action_names; }

  bool has_labels() const { return !labels_.empty(); }
  bool has_agent_ids() const { return !agent_ids_.empty(); }
  bool has_timestamps() const { return !timestamps_.empty(); }

  std::span<const double> state_row(std::size_t i) const {
    return {states_.data() + i * n_features(), n_features()};
  }
  std::span<const double> action_row(std::size_t i) const {
    return {actions_.data() + i * n_actions(), n_actions()};
  }
  double state(std::size_t i, std::size_t j) const { return states_[i * n_features() + j]; }
  double action(std::size_t i, std::size_t j) const { return actions_[i * n_actions() + j]; }
  int label(std::size_t i) const { return labels_[i]; }
  std::int64_t agent_id(std::size_t i) const { return agent_ids_[i]; }
  std::int64_t timestamp(std::size_t i) const { return timestamps_[i]; }

  const std::vector<double>& states_flat() const { return states_; }
  const std::vector<double>& actions_flat() const { return actions_; }
  const std::vector<int>& labels() const { return labels_; }
  const std::vector<std::int64_t>& agent_ids() const { return agent_ids_; }
  const std::vector<std::int64_t>& timestamps() const { return timestamps_; }

  Observation row(std::size_t i) const;

  void add_row(std::span<const double> state, std::span<const double> action,
               std::optional<int> label = std::nullopt,
               std::optional<std::int64_t> agent_id = std::nullopt,
               std::optional<std::int64_t> timestamp = std::nullopt);

  // Number of distinct label values; requires labels in contiguous [0, L).
  int n_label_values() const;

  // Copy with label/agent_id/timestamp columns removed. The clustering
  // pipeline operates on this view only, so ground truth can never leak into
  // a pipeline stage.
  Dataset without_metadata() const;

  // Row subset in the given order.
  Dataset gather(std::span<const std::size_t> indices) const;

  // Throws if labels are present but not a contiguous range [0, L).
  void validate_labels() const;

 private:
  SchemaDescriptor schema_;
  std::size_t rows_ = 0;
  std::vector<double> states_;   // rows_ x F, row-major
  std::vector<double> actions_;  // rows_ x d, row-major
  std::vector<int> labels_;
  std::vector<std::int64_t> agent_ids_;
  std::vector<std::int64_t> timestamps_;
};

// ---------------------------------------------------------------------------
// CSV interchange
//
// Comma-separated, '.' decimal point, UTF-8, header row first. Columns are
// feature_names ++ action_names ++ optional trailing [label, agent_id,
// timestamp]. Numeric fields use shortest round-trip formatting, so
// save -> load reproduces every double bit-exactly.
// ---------------------------------------------------------------------------

Dataset load_csv(const std::string& path, const SchemaDescriptor& schema);
// Detects the schema from the header among the built-ins.
Dataset load_csv(const std::string& path);

void save_csv(const Dataset& dataset, const std::string& path);

// ---------------------------------------------------------------------------
// Standardization (baselines only; SHAP vectors are clustered unscaled)
// ---------------------------------------------------------------------------

struct FeatureScaler {
  std::vector<double> means;
  std::vector<double> stds;  // sample std (ddof = 1)
  std::vector<bool> constant_mask;

  std::size_t size() const { return means.size(); }
  double transform(std::size_t j, double v) const {
    return constant_mask[j] ? 0.0 : (v - means[j]) / stds[j];
  }
  double inverse(std::size_t j, double v) const {
    return constant_mask[j] ? means[j] : v * stds[j] + means[j];
  }
};

FeatureScaler fit_scaler(const Dataset& dataset);
Dataset apply_scaler(const FeatureScaler& scaler, const Dataset& dataset);
Dataset invert_scaler(const FeatureScaler& scaler, const Dataset& dataset);

// Scaler over an arbitrary row-major matrix (used by the raw-space baselines,
// which standardize state++action jointly).
FeatureScaler fit_scaler_matrix(const std::vector<double>& values,
                                std::size_t rows, std::size_t cols);

// ---------------------------------------------------------------------------
// Deterministic splits
// ---------------------------------------------------------------------------

// Shuffled index partition: first part has floor(fraction * n) elements.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(
    std::size_t n, double fraction, std::uint64_t seed);

std::pair<Dataset, Dataset> split(const Dataset& dataset, double fraction,
                                  std::uint64_t seed);

}  // namespace kshap
