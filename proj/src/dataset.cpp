#include "kshap/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

namespace kshap {

namespace {

std::vector<std::string> market_v1_features() {
  return {
      "spread",
      "vol_imb_l1", "vol_imb_l2", "vol_imb_l5",
      "exec_imb_1m", "exec_imb_5m", "exec_imb_12m", "exec_imb_26m",
      "ret_1m", "ret_5m", "ret_12m", "ret_26m",
      "price_ma_12s", "price_ma_26s", "price_ma_60s", "price_ma_5m",
      "price_ma_12m", "price_ma_26m", "price_ma_48m", "price_ma_96m",
      "spread_ma_12s", "spread_ma_26s", "spread_ma_60s", "spread_ma_5m",
      "spread_ma_12m", "spread_ma_26m",
      "ma_diff_12s_26s", "ma_diff_12m_26m", "ma_diff_48m_96m",
  };
}

SchemaDescriptor make_market_v1() {
  SchemaDescriptor s;
  s.id = "market-v1";
  s.feature_names = market_v1_features();
  s.action_names = {"order_size", "order_depth", "order_direction"};
  s.size_index = 0;
  s.direction_index = 2;
  return s;
}

SchemaDescriptor make_pd_v1() {
  SchemaDescriptor s;
  s.id = "pd-v1";
  s.feature_names = {"timestep", "prev_action"};
  s.action_names = {"action"};
  s.binary_actions = true;
  return s;
}

SchemaDescriptor make_pd_null() {
  SchemaDescriptor s;
  s.id = "pd-v1";
  s.feature_names = {"null_state"};
  s.action_names = {"action"};
  s.binary_actions = true;
  return s;
}

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

}  // namespace

const SchemaDescriptor& builtin_schema(const std::string& id) {
  static const SchemaDescriptor market = make_market_v1();
  static const SchemaDescriptor pd = make_pd_v1();
  if (id == "market-v1") return market;
  if (id == "pd-v1") return pd;
  throw Error(Errc::schema_mismatch, "unknown schema id '" + id + "'");
}

const SchemaDescriptor& pd_null_schema() {
  static const SchemaDescriptor pd_null = make_pd_null();
  return pd_null;
}

std::vector<std::string> builtin_schema_ids() { return {"market-v1", "pd-v1"}; }

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

Observation Dataset::row(std::size_t i) const {
  Observation o;
  auto s = state_row(i);
  auto a = action_row(i);
  o.state.assign(s.begin(), s.end());
  o.action.assign(a.begin(), a.end());
  if (has_labels()) o.label = labels_[i];
  if (has_agent_ids()) o.agent_id = agent_ids_[i];
  if (has_timestamps()) o.timestamp = timestamps_[i];
  return o;
}

void Dataset::add_row(std::span<const double> state, std::span<const double> action,
                      std::optional<int> label, std::optional<std::int64_t> agent_id,
                      std::optional<std::int64_t> timestamp) {
  if (state.size() != n_features() || action.size() != n_actions())
    throw Error(Errc::dimension_mismatch,
                "row has " + std::to_string(state.size()) + "/" +
                    std::to_string(action.size()) + " entries, schema expects " +
                    std::to_string(n_features()) + "/" + std::to_string(n_actions()));
  if ((label.has_value() != (rows_ == 0 ? label.has_value() : has_labels())) ||
      (agent_id.has_value() != (rows_ == 0 ? agent_id.has_value() : has_agent_ids())) ||
      (timestamp.has_value() != (rows_ == 0 ? timestamp.has_value() : has_timestamps())))
    throw Error(Errc::type_mismatch, "optional columns must be present on all rows or none");
  states_.insert(states_.end(), state.begin(), state.end());
  actions_.insert(actions_.end(), action.begin(), action.end());
  if (label) labels_.push_back(*label);
  if (agent_id) agent_ids_.push_back(*agent_id);
  if (timestamp) timestamps_.push_back(*timestamp);
  ++rows_;
}

int Dataset::n_label_values() const {
  if (!has_labels()) return 0;
  return *std::max_element(labels_.begin(), labels_.end()) + 1;
}

Dataset Dataset::without_metadata() const {
  Dataset out(schema_);
  out.rows_ = rows_;
  out.states_ = states_;
  out.actions_ = actions_;
  return out;
}

Dataset Dataset::gather(std::span<const std::size_t> indices) const {
  Dataset out(schema_);
  for (std::size_t i : indices) {
    out.add_row(state_row(i), action_row(i),
                has_labels() ? std::optional<int>(labels_[i]) : std::nullopt,
                has_agent_ids() ? std::optional<std::int64_t>(agent_ids_[i]) : std::nullopt,
                has_timestamps() ? std::optional<std::int64_t>(timestamps_[i]) : std::nullopt);
  }
  return out;
}

void Dataset::validate_labels() const {
  if (!has_labels()) return;
  int max_label = *std::max_element(labels_.begin(), labels_.end());
  int min_label = *std::min_element(labels_.begin(), labels_.end());
  if (min_label < 0)
    throw Error(Errc::type_mismatch, "negative label value " + std::to_string(min_label));
  std::vector<char> seen(max_label + 1, 0);
  for (int l : labels_) seen[l] = 1;
  for (int l = 0; l <= max_label; ++l)
    if (!seen[l])
      throw Error(Errc::type_mismatch,
                  "label values must form a contiguous range [0, L); missing " +
                      std::to_string(l));
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

namespace {

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (;;) {
    std::size_t pos = line.find(',', start);
    if (pos == std::string::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  if (!out.empty() && !out.back().empty() && out.back().back() == '\r')
    out.back().pop_back();
  return out;
}

double parse_double_cell(const std::string& cell, std::size_t line_no,
                         const std::string& col) {
  double v = 0.0;
  auto res = std::from_chars(cell.data(), cell.data() + cell.size(), v);
  if (res.ec != std::errc() || res.ptr != cell.data() + cell.size())
    throw Error(Errc::type_mismatch, "cannot parse '" + cell + "' as number at line " +
                                         std::to_string(line_no) + ", column '" + col + "'");
  if (!std::isfinite(v))
    throw Error(Errc::non_finite_value, "non-finite value at line " +
                                            std::to_string(line_no) + ", column '" + col + "'");
  return v;
}

std::int64_t parse_int_cell(const std::string& cell, std::size_t line_no,
                            const std::string& col) {
  std::int64_t v = 0;
  auto res = std::from_chars(cell.data(), cell.data() + cell.size(), v);
  if (res.ec != std::errc() || res.ptr != cell.data() + cell.size())
    throw Error(Errc::type_mismatch, "cannot parse '" + cell + "' as integer at line " +
                                         std::to_string(line_no) + ", column '" + col + "'");
  return v;
}

void check_action_constraints(const SchemaDescriptor& schema,
                              std::span<const double> action, std::size_t line_no) {
  if (schema.size_index >= 0) {
    double v = action[schema.size_index];
    if (v < 1.0)
      throw Error(Errc::type_mismatch,
                  "order size must be >= 1 at line " + std::to_string(line_no) +
                      ", column '" + schema.action_names[schema.size_index] + "'");
  }
  if (schema.direction_index >= 0) {
    double v = action[schema.direction_index];
    if (v != 0.0 && v != 1.0)
      throw Error(Errc::type_mismatch,
                  "direction must be exactly 0 or 1 at line " + std::to_string(line_no) +
                      ", column '" + schema.action_names[schema.direction_index] + "'");
  }
  if (schema.binary_actions) {
    for (std::size_t j = 0; j < action.size(); ++j)
      if (action[j] != 0.0 && action[j] != 1.0)
        throw Error(Errc::type_mismatch,
                    "action must be 0 or 1 at line " + std::to_string(line_no) +
                        ", column '" + schema.action_names[j] + "'");
  }
}

Dataset load_csv_impl(const std::string& path, const SchemaDescriptor* schema) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::io_failure, "cannot open '" + path + "' for reading");
  std::string line;
  if (!std::getline(in, line))
    throw Error(Errc::missing_column, "file '" + path + "' has no header row");
  std::vector<std::string> header = split_line(line);

  if (schema == nullptr) {
    const SchemaDescriptor* candidates[] = {&builtin_schema("market-v1"),
                                            &builtin_schema("pd-v1"), &pd_null_schema()};
    for (const SchemaDescriptor* c : candidates) {
      std::size_t base = c->feature_names.size() + c->action_names.size();
      if (header.size() < base) continue;
      bool ok = true;
      for (std::size_t j = 0; j < c->feature_names.size() && ok; ++j)
        ok = header[j] == c->feature_names[j];
      for (std::size_t j = 0; j < c->action_names.size() && ok; ++j)
        ok = header[c->feature_names.size() + j] == c->action_names[j];
      if (ok) {
        schema = c;
        break;
      }
    }
    if (schema == nullptr)
      throw Error(Errc::schema_mismatch,
                  "header of '" + path + "' does not match any built-in schema");
  }

  std::size_t f = schema->feature_names.size();
  std::size_t d = schema->action_names.size();
  std::size_t col = 0;
  for (std::size_t j = 0; j < f; ++j, ++col) {
    if (col >= header.size() || header[col] != schema->feature_names[j])
      throw Error(Errc::missing_column, "expected column '" + schema->feature_names[j] +
                                            "' at position " + std::to_string(col + 1));
  }
  for (std::size_t j = 0; j < d; ++j, ++col) {
    if (col >= header.size() || header[col] != schema->action_names[j])
      throw Error(Errc::missing_column, "expected column '" + schema->action_names[j] +
                                            "' at position " + std::to_string(col + 1));
  }
  // Optional trailing columns, order-sensitive.
  bool has_label = false, has_agent = false, has_ts = false;
  const char* trailing[] = {"label", "agent_id", "timestamp"};
  bool* flags[] = {&has_label, &has_agent, &has_ts};
  std::size_t t = 0;
  for (; col < header.size(); ++col) {
    while (t < 3 && header[col] != trailing[t]) ++t;
    if (t >= 3)
      throw Error(Errc::missing_column,
                  "unexpected trailing column '" + header[col] + "' in '" + path + "'");
    *flags[t] = true;
    ++t;
  }

  Dataset out(*schema);
  std::vector<double> state(f), action(d);
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || (line.size() == 1 && line[0] == '\r')) continue;
    std::vector<std::string> cells = split_line(line);
    if (cells.size() != header.size())
      throw Error(Errc::type_mismatch, "line " + std::to_string(line_no) + " has " +
                                           std::to_string(cells.size()) + " cells, expected " +
                                           std::to_string(header.size()));
    std::size_t c = 0;
    for (std::size_t j = 0; j < f; ++j, ++c)
      state[j] = parse_double_cell(cells[c], line_no, header[c]);
    for (std::size_t j = 0; j < d; ++j, ++c)
      action[j] = parse_double_cell(cells[c], line_no, header[c]);
    check_action_constraints(*schema, action, line_no);
    std::optional<int> label;
    std::optional<std::int64_t> agent, ts;
    if (has_label) label = static_cast<int>(parse_int_cell(cells[c], line_no, "label")), ++c;
    if (has_agent) agent = parse_int_cell(cells[c], line_no, "agent_id"), ++c;
    if (has_ts) ts = parse_int_cell(cells[c], line_no, "timestamp"), ++c;
    out.add_row(state, action, label, agent, ts);
  }
  out.validate_labels();
  return out;
}

}  // namespace

Dataset load_csv(const std::string& path, const SchemaDescriptor& schema) {
  return load_csv_impl(path, &schema);
}

Dataset load_csv(const std::string& path) { return load_csv_impl(path, nullptr); }

void save_csv(const Dataset& dataset, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error(Errc::io_failure, "cannot open '" + path + "' for writing");
  const auto& schema = dataset.schema();
  bool first = true;
  for (const auto& name : schema.feature_names) {
    if (!first) out << ',';
    out << name;
    first = false;
  }
  for (const auto& name : schema.action_names) out << ',' << name;
  if (dataset.has_labels()) out << ",label";
  if (dataset.has_agent_ids()) out << ",agent_id";
  if (dataset.has_timestamps()) out << ",timestamp";
  out << '\n';
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    first = true;
    for (double v : dataset.state_row(i)) {
      if (!first) out << ',';
      out << format_double(v);
      first = false;
    }
    for (double v : dataset.action_row(i)) out << ',' << format_double(v);
    if (dataset.has_labels()) out << ',' << dataset.label(i);
    if (dataset.has_agent_ids()) out << ',' << dataset.agent_id(i);
    if (dataset.has_timestamps()) out << ',' << dataset.timestamp(i);
    out << '\n';
  }
  if (!out) throw Error(Errc::io_failure, "write to '" + path + "' failed");
}

// ---------------------------------------------------------------------------
// Standardization
// ---------------------------------------------------------------------------

FeatureScaler fit_scaler_matrix(const std::vector<double>& values, std::size_t rows,
                                std::size_t cols) {
  if (rows < 2) throw Error(Errc::empty_dataset, "need at least 2 rows to fit a scaler");
  FeatureScaler s;
  s.means.assign(cols, 0.0);
  s.stds.assign(cols, 1.0);
  s.constant_mask.assign(cols, false);
  for (std::size_t j = 0; j < cols; ++j) {
    double sum = 0.0;
    for (std::size_t i = 0; i < rows; ++i) sum += values[i * cols + j];
    double mean = sum / static_cast<double>(rows);
    double ss = 0.0;
    for (std::size_t i = 0; i < rows; ++i) {
      double dv = values[i * cols + j] - mean;
      ss += dv * dv;
    }
    double sd = std::sqrt(ss / static_cast<double>(rows - 1));
    s.means[j] = mean;
    if (sd <= 1e-12 * std::max(1.0, std::abs(mean))) {
      s.constant_mask[j] = true;
      s.stds[j] = 1.0;
    } else {
      s.stds[j] = sd;
    }
  }
  return s;
}

FeatureScaler fit_scaler(const Dataset& dataset) {
  return fit_scaler_matrix(dataset.states_flat(), dataset.size(), dataset.n_features());
}

namespace {

Dataset map_states(const FeatureScaler& scaler, const Dataset& dataset, bool inverse) {
  if (scaler.size() != dataset.n_features())
    throw Error(Errc::dimension_mismatch, "scaler has " + std::to_string(scaler.size()) +
                                              " columns, dataset has " +
                                              std::to_string(dataset.n_features()));
  Dataset out(dataset.schema());
  std::vector<double> state(dataset.n_features());
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    auto src = dataset.state_row(i);
    for (std::size_t j = 0; j < state.size(); ++j)
      state[j] = inverse ? scaler.inverse(j, src[j]) : scaler.transform(j, src[j]);
    out.add_row(state, dataset.action_row(i),
                dataset.has_labels() ? std::optional<int>(dataset.label(i)) : std::nullopt,
                dataset.has_agent_ids() ? std::optional<std::int64_t>(dataset.agent_id(i))
                                        : std::nullopt,
                dataset.has_timestamps() ? std::optional<std::int64_t>(dataset.timestamp(i))
                                         : std::nullopt);
  }
  return out;
}

}  // namespace

Dataset apply_scaler(const FeatureScaler& scaler, const Dataset& dataset) {
  return map_states(scaler, dataset, false);
}

Dataset invert_scaler(const FeatureScaler& scaler, const Dataset& dataset) {
  return map_states(scaler, dataset, true);
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(
    std::size_t n, double fraction, std::uint64_t seed) {
  if (n == 0) throw Error(Errc::empty_dataset, "cannot split an empty dataset");
  if (!(fraction > 0.0 && fraction < 1.0))
    throw Error(Errc::invalid_config, "split fraction must be in (0, 1)");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(mix64(seed, 0x5311fULL));
  for (std::size_t i = n - 1; i > 0; --i) {
    std::size_t j = rng.uniform_int(i + 1);
    std::swap(idx[i], idx[j]);
  }
  std::size_t cut = static_cast<std::size_t>(fraction * static_cast<double>(n));
  std::vector<std::size_t> a(idx.begin(), idx.begin() + cut);
  std::vector<std::size_t> b(idx.begin() + cut, idx.end());
  return {std::move(a), std::move(b)};
}

std::pair<Dataset, Dataset> split(const Dataset& dataset, double fraction,
                                  std::uint64_t seed) {
  auto [ia, ib] = split_indices(dataset.size(), fraction, seed);
  return {dataset.gather(ia), dataset.gather(ib)};
}

}  // namespace kshap
