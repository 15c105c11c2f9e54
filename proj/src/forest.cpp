#include "kshap/forest.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numeric>

#include <json.hpp>

namespace kshap {

namespace {

constexpr std::uint64_t kTreeStream = 0x7EE5;
constexpr double kGainEps = 1e-12;  // relative improvement required to split

}  // namespace

// ---------------------------------------------------------------------------
// Tree
// ---------------------------------------------------------------------------

int Tree::depth() const {
  int max_depth = 0;
  std::vector<std::pair<std::int32_t, int>> stack{{0, 0}};
  while (!stack.empty()) {
    auto [node, d] = stack.back();
    stack.pop_back();
    max_depth = std::max(max_depth, d);
    if (!is_leaf(node)) {
      stack.push_back({left[node], d + 1});
      stack.push_back({right[node], d + 1});
    }
  }
  return max_depth;
}

void Tree::validate(std::size_t n_features) const {
  for (std::size_t i = 0; i < n_nodes(); ++i) {
    if (cover[i] < 1)
      throw Error(Errc::invalid_config, "tree node " + std::to_string(i) + " has cover 0");
    if (is_leaf(i)) continue;
    if (feature[i] >= static_cast<std::int32_t>(n_features))
      throw Error(Errc::dimension_mismatch,
                  "tree split feature " + std::to_string(feature[i]) + " out of range");
    if (cover[i] != cover[left[i]] + cover[right[i]])
      throw Error(Errc::invalid_config,
                  "cover conservation violated at node " + std::to_string(i));
  }
}

// ---------------------------------------------------------------------------
// Params
// ---------------------------------------------------------------------------

int ForestParams::resolved_max_features(std::size_t n_features) const {
  if (max_features > 0) return std::min<int>(max_features, static_cast<int>(n_features));
  return static_cast<int>(std::ceil(std::sqrt(static_cast<double>(n_features))));
}

void ForestParams::validate() const {
  if (n_trees < 1 || max_depth < 1 || min_samples_leaf < 1 || max_features < 0)
    throw Error(Errc::invalid_config, "forest parameters must be positive");
}

// ---------------------------------------------------------------------------
// Split search
// ---------------------------------------------------------------------------

std::optional<Split> split_search(std::span<const double> states, std::size_t n_features,
                                  std::span<const double> targets,
                                  std::span<const std::size_t> sample_indices,
                                  std::span<const int> feature_subset,
                                  int min_samples_leaf) {
  const std::size_t n = sample_indices.size();
  if (n < 2 * static_cast<std::size_t>(min_samples_leaf)) return std::nullopt;

  double total = 0.0;
  for (std::size_t idx : sample_indices) total += targets[idx];
  const double parent_score = total * total / static_cast<double>(n);

  thread_local std::vector<std::pair<double, double>> pairs;
  pairs.resize(n);

  std::optional<Split> best;
  double best_score = parent_score;
  const double eps = kGainEps * std::max(1.0, std::abs(parent_score));

  for (int f : feature_subset) {
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t idx = sample_indices[i];
      pairs[i] = {states[idx * n_features + f], targets[idx]};
    }
    std::sort(pairs.begin(), pairs.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });

    double left_sum = 0.0;
    for (std::size_t i = 1; i < n; ++i) {
      left_sum += pairs[i - 1].second;
      if (pairs[i].first == pairs[i - 1].first) continue;  // split only between distinct values
      if (i < static_cast<std::size_t>(min_samples_leaf) ||
          n - i < static_cast<std::size_t>(min_samples_leaf))
        continue;
      double right_sum = total - left_sum;
      double score = left_sum * left_sum / static_cast<double>(i) +
                     right_sum * right_sum / static_cast<double>(n - i);
      if (score > best_score + eps) {
        best_score = score;
        // Midpoints of adjacent doubles can round up to the right value; fall
        // back to the left value so `x <= threshold` always separates.
        double thr = 0.5 * (pairs[i - 1].first + pairs[i].first);
        if (!(thr < pairs[i].first)) thr = pairs[i - 1].first;
        best = Split{f, thr, score - parent_score};
      }
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// Tree growing
// ---------------------------------------------------------------------------

namespace {

struct TreeBuilder {
  const std::vector<double>& states;
  std::size_t n_features;
  const std::vector<double>& targets;
  const ForestParams& params;
  int max_features;
  Rng& rng;
  Tree tree;
  std::vector<int> all_features;

  TreeBuilder(const std::vector<double>& s, std::size_t f, const std::vector<double>& y,
              const ForestParams& p, Rng& r)
      : states(s), n_features(f), targets(y), params(p),
        max_features(p.resolved_max_features(f)), rng(r) {
    all_features.resize(f);
    std::iota(all_features.begin(), all_features.end(), 0);
  }

  std::vector<int> draw_feature_subset() {
    // Partial Fisher-Yates, then sorted ascending so the tie rule sees
    // candidates in index order.
    for (int i = 0; i < max_features; ++i) {
      std::size_t j = i + rng.uniform_int(all_features.size() - i);
      std::swap(all_features[i], all_features[j]);
    }
    std::vector<int> subset(all_features.begin(), all_features.begin() + max_features);
    std::sort(subset.begin(), subset.end());
    return subset;
  }

  std::int32_t grow(std::vector<std::size_t>& indices, int depth) {
    double sum = 0.0;
    for (std::size_t idx : indices) sum += targets[idx];
    double mean = sum / static_cast<double>(indices.size());

    std::int32_t node = static_cast<std::int32_t>(tree.n_nodes());
    tree.feature.push_back(-1);
    tree.threshold.push_back(0.0);
    tree.left.push_back(-1);
    tree.right.push_back(-1);
    tree.value.push_back(mean);
    tree.cover.push_back(static_cast<std::uint32_t>(indices.size()));

    if (depth >= params.max_depth ||
        indices.size() < 2 * static_cast<std::size_t>(params.min_samples_leaf))
      return node;

    std::vector<int> subset = draw_feature_subset();
    auto split = split_search(states, n_features, targets, indices, subset,
                              params.min_samples_leaf);
    if (!split) return node;

    std::vector<std::size_t> left_idx, right_idx;
    left_idx.reserve(indices.size());
    right_idx.reserve(indices.size());
    for (std::size_t idx : indices) {
      if (states[idx * n_features + split->feature] <= split->threshold)
        left_idx.push_back(idx);
      else
        right_idx.push_back(idx);
    }
    indices.clear();
    indices.shrink_to_fit();

    tree.feature[node] = split->feature;
    tree.threshold[node] = split->threshold;
    std::int32_t l = grow(left_idx, depth + 1);
    tree.left[node] = l;
    std::int32_t r = grow(right_idx, depth + 1);
    tree.right[node] = r;
    return node;
  }
};

Tree grow_tree(const std::vector<double>& states, std::size_t n_features,
               const std::vector<double>& targets, std::size_t n_rows,
               const ForestParams& params, std::uint64_t tree_seed,
               std::vector<char>* oob_mask) {
  Rng rng(tree_seed);
  std::vector<std::size_t> bootstrap(n_rows);
  if (oob_mask) oob_mask->assign(n_rows, 1);
  for (std::size_t i = 0; i < n_rows; ++i) {
    std::size_t idx = rng.uniform_int(n_rows);
    bootstrap[i] = idx;
    if (oob_mask) (*oob_mask)[idx] = 0;
  }
  TreeBuilder builder(states, n_features, targets, params, rng);
  builder.grow(bootstrap, 0);
  return std::move(builder.tree);
}

}  // namespace

// ---------------------------------------------------------------------------
// RandomForest
// ---------------------------------------------------------------------------

RandomForest RandomForest::fit(const Dataset& dataset, const ForestParams& params) {
  params.validate();
  const std::size_t n = dataset.size();
  const std::size_t f = dataset.n_features();
  const std::size_t d = dataset.n_actions();
  if (n < 2) throw Error(Errc::empty_dataset, "need at least 2 rows to fit a forest");

  RandomForest forest;
  forest.params_ = params;
  forest.feature_names_ = dataset.feature_names();
  forest.action_names_ = dataset.action_names();
  forest.dims_.assign(d, std::vector<Tree>(params.n_trees));

  // Per-dimension target columns.
  std::vector<std::vector<double>> targets(d, std::vector<double>(n));
  for (std::size_t i = 0; i < n; ++i) {
    auto a = dataset.action_row(i);
    for (std::size_t j = 0; j < d; ++j) targets[j][i] = a[j];
  }
  for (std::size_t j = 0; j < d; ++j) {
    double first = targets[j][0];
    bool constant = std::all_of(targets[j].begin(), targets[j].end(),
                                [&](double v) { return v == first; });
    if (constant)
      std::cerr << "kshap: warning: action column '" << forest.action_names_[j]
                << "' is constant; trees degenerate to single leaves\n";
  }

  std::vector<std::vector<std::vector<char>>> oob_masks;
  if (params.compute_oob)
    oob_masks.assign(d, std::vector<std::vector<char>>(params.n_trees));

  const std::size_t tasks = d * static_cast<std::size_t>(params.n_trees);
  parallel_for(tasks, 0, [&](std::size_t task) {
    std::size_t dim = task / params.n_trees;
    std::size_t t = task % params.n_trees;
    std::uint64_t tree_seed = mix64(params.seed, mix64(kTreeStream, dim), t);
    forest.dims_[dim][t] =
        grow_tree(dataset.states_flat(), f, targets[dim], n, params, tree_seed,
                  params.compute_oob ? &oob_masks[dim][t] : nullptr);
  });

  if (params.compute_oob) {
    forest.oob_mse_.assign(d, 0.0);
    for (std::size_t dim = 0; dim < d; ++dim) {
      std::vector<double> sum(n, 0.0);
      std::vector<int> count(n, 0);
      for (int t = 0; t < params.n_trees; ++t) {
        const auto& mask = oob_masks[dim][t];
        for (std::size_t i = 0; i < n; ++i) {
          if (!mask[i]) continue;
          sum[i] += forest.dims_[dim][t].predict(dataset.state_row(i));
          ++count[i];
        }
      }
      double se = 0.0;
      std::size_t covered = 0;
      for (std::size_t i = 0; i < n; ++i) {
        if (count[i] == 0) continue;
        double err = sum[i] / count[i] - targets[dim][i];
        se += err * err;
        ++covered;
      }
      forest.oob_mse_[dim] = covered > 0 ? se / static_cast<double>(covered) : 0.0;
    }
  }
  return forest;
}

void RandomForest::predict_into(std::span<const double> state,
                                std::span<double> out) const {
  if (state.size() != n_features())
    throw Error(Errc::dimension_mismatch,
                "state has " + std::to_string(state.size()) + " entries, forest expects " +
                    std::to_string(n_features()));
  for (std::size_t j = 0; j < dims_.size(); ++j) {
    double acc = 0.0;
    for (const Tree& t : dims_[j]) acc += t.predict(state);
    out[j] = acc / static_cast<double>(dims_[j].size());
  }
}

std::vector<double> RandomForest::predict(std::span<const double> state) const {
  std::vector<double> out(n_outputs());
  predict_into(state, out);
  return out;
}

double RandomForest::predict_dim(std::span<const double> state, std::size_t dim) const {
  double acc = 0.0;
  for (const Tree& t : dims_[dim]) acc += t.predict(state);
  return acc / static_cast<double>(dims_[dim].size());
}

std::vector<double> RandomForest::predict_batch(const Dataset& dataset,
                                                int n_threads) const {
  if (dataset.n_features() != n_features())
    throw Error(Errc::schema_mismatch, "dataset feature count does not match the model");
  std::vector<double> out(dataset.size() * n_outputs());
  parallel_for(dataset.size(), n_threads, [&](std::size_t i) {
    predict_into(dataset.state_row(i),
                 std::span<double>(out.data() + i * n_outputs(), n_outputs()));
  });
  return out;
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

namespace {

nlohmann::json tree_to_json(const Tree& t) {
  nlohmann::json nodes = nlohmann::json::array();
  for (std::size_t i = 0; i < t.n_nodes(); ++i) {
    nlohmann::json node;
    if (t.is_leaf(i)) {
      node["value"] = t.value[i];
    } else {
      node["feature"] = t.feature[i];
      node["threshold"] = t.threshold[i];
      node["left"] = t.left[i];
      node["right"] = t.right[i];
    }
    node["cover"] = t.cover[i];
    nodes.push_back(std::move(node));
  }
  return nlohmann::json{{"nodes", std::move(nodes)}};
}

Tree tree_from_json(const nlohmann::json& j) {
  Tree t;
  const auto& nodes = j.at("nodes");
  for (const auto& node : nodes) {
    if (node.contains("feature")) {
      t.feature.push_back(node.at("feature").get<std::int32_t>());
      t.threshold.push_back(node.at("threshold").get<double>());
      t.left.push_back(node.at("left").get<std::int32_t>());
      t.right.push_back(node.at("right").get<std::int32_t>());
      t.value.push_back(0.0);
    } else {
      t.feature.push_back(-1);
      t.threshold.push_back(0.0);
      t.left.push_back(-1);
      t.right.push_back(-1);
      t.value.push_back(node.at("value").get<double>());
    }
    t.cover.push_back(node.at("cover").get<std::uint32_t>());
  }
  return t;
}

}  // namespace

std::string RandomForest::to_json_string() const {
  nlohmann::json doc;
  doc["format"] = "kshap-forest";
  doc["version"] = 1;
  doc["params"] = {{"n_trees", params_.n_trees},
                   {"max_depth", params_.max_depth},
                   {"min_samples_leaf", params_.min_samples_leaf},
                   {"max_features", params_.max_features},
                   {"seed", params_.seed}};
  doc["feature_names"] = feature_names_;
  doc["action_names"] = action_names_;
  doc["actions_standardized"] = false;  // fit on raw action units
  nlohmann::json dims = nlohmann::json::array();
  for (std::size_t j = 0; j < dims_.size(); ++j) {
    nlohmann::json trees = nlohmann::json::array();
    for (const Tree& t : dims_[j]) trees.push_back(tree_to_json(t));
    dims.push_back(nlohmann::json{{"action", action_names_[j]}, {"trees", std::move(trees)}});
  }
  doc["dims"] = std::move(dims);
  if (!oob_mse_.empty()) doc["oob_mse"] = oob_mse_;
  return doc.dump();
}

RandomForest RandomForest::from_json_string(const std::string& text) {
  nlohmann::json doc = nlohmann::json::parse(text);
  if (doc.value("format", "") != std::string("kshap-forest"))
    throw Error(Errc::schema_mismatch, "not a kshap-forest document");
  RandomForest forest;
  const auto& p = doc.at("params");
  forest.params_.n_trees = p.at("n_trees").get<int>();
  forest.params_.max_depth = p.at("max_depth").get<int>();
  forest.params_.min_samples_leaf = p.at("min_samples_leaf").get<int>();
  forest.params_.max_features = p.at("max_features").get<int>();
  forest.params_.seed = p.at("seed").get<std::uint64_t>();
  forest.feature_names_ = doc.at("feature_names").get<std::vector<std::string>>();
  forest.action_names_ = doc.at("action_names").get<std::vector<std::string>>();
  for (const auto& dim : doc.at("dims")) {
    std::vector<Tree> trees;
    for (const auto& tj : dim.at("trees")) {
      Tree t = tree_from_json(tj);
      t.validate(forest.feature_names_.size());
      trees.push_back(std::move(t));
    }
    forest.dims_.push_back(std::move(trees));
  }
  if (doc.contains("oob_mse")) forest.oob_mse_ = doc.at("oob_mse").get<std::vector<double>>();
  return forest;
}

void RandomForest::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw Error(Errc::io_failure, "cannot open '" + path + "' for writing");
  out << to_json_string();
  if (!out) throw Error(Errc::io_failure, "write to '" + path + "' failed");
}

RandomForest RandomForest::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::io_failure, "cannot open '" + path + "' for reading");
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return from_json_string(text);
}

}  // namespace kshap
