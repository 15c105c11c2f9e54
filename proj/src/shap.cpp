#include "kshap/shap.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>

namespace kshap {

namespace {

constexpr std::uint64_t kBackgroundStream = 0xBAC6;
constexpr int kMaxPathDepth = 64;

// W[a][b] = a! * b! / (a + b + 1)!, the Shapley weight of a leaf constraint
// set with a required-present and b required-absent features.
struct WeightTable {
  double w[kMaxPathDepth][kMaxPathDepth];
  WeightTable() {
    for (int a = 0; a < kMaxPathDepth; ++a)
      for (int b = 0; b < kMaxPathDepth; ++b) {
        long double v = 1.0L;
        // a! b! / (a+b+1)! = 1 / ((a+b+1) * C(a+b, a))
        for (int i = 1; i <= b; ++i) v *= static_cast<long double>(i) / (a + i);
        v /= (a + b + 1);
        w[a][b] = static_cast<double>(v);
      }
  }
};

const WeightTable& weight_table() {
  static const WeightTable table;
  return table;
}

}  // namespace

// ---------------------------------------------------------------------------
// Background
// ---------------------------------------------------------------------------

Background make_background(const Dataset& dataset, std::size_t size, std::uint64_t seed) {
  if (size == 0) throw Error(Errc::empty_background, "background size must be >= 1");
  if (dataset.size() == 0)
    throw Error(Errc::empty_dataset, "cannot sample a background from an empty dataset");
  const std::size_t n = dataset.size();
  const std::size_t f = dataset.n_features();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  if (size < n) {
    Rng rng(mix64(seed, kBackgroundStream));
    for (std::size_t i = 0; i < size; ++i) {
      std::size_t j = i + rng.uniform_int(n - i);
      std::swap(idx[i], idx[j]);
    }
    idx.resize(size);
    std::sort(idx.begin(), idx.end());
  }
  Background bg;
  bg.rows = idx.size();
  bg.cols = f;
  bg.data.reserve(bg.rows * f);
  for (std::size_t i : idx) {
    auto row = dataset.state_row(i);
    bg.data.insert(bg.data.end(), row.begin(), row.end());
  }
  return bg;
}

std::vector<double> ShapMatrix::action_dim_slice(std::size_t dim) const {
  std::vector<double> out(rows * n_features);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t f = 0; f < n_features; ++f)
      out[i * n_features + f] = values[i * dims() + f * n_outputs + dim];
  return out;
}

// ---------------------------------------------------------------------------
// Exact enumeration oracle
// ---------------------------------------------------------------------------

ShapExplanation exact_shap(const PredictFn& model, std::size_t n_outputs,
                           std::span<const double> x, const Background& background) {
  const std::size_t f = x.size();
  if (f > 15)
    throw Error(Errc::too_many_features,
                "exact_shap enumerates 2^F subsets; F = " + std::to_string(f) + " > 15");
  if (background.rows == 0) throw Error(Errc::empty_background, "background is empty");
  if (background.cols != f)
    throw Error(Errc::dimension_mismatch, "background column count does not match x");

  const std::size_t n_masks = std::size_t{1} << f;
  const std::size_t d = n_outputs;

  // v[mask * d + j] = mean over background rows of the model applied to the
  // hybrid input taking x on the mask and the background row elsewhere.
  std::vector<double> v(n_masks * d, 0.0);
  std::vector<double> hybrid(f);
  std::vector<double> out(d);
  for (std::size_t mask = 0; mask < n_masks; ++mask) {
    for (std::size_t b = 0; b < background.rows; ++b) {
      auto row = background.row(b);
      for (std::size_t i = 0; i < f; ++i)
        hybrid[i] = (mask >> i) & 1 ? x[i] : row[i];
      model(hybrid, out);
      for (std::size_t j = 0; j < d; ++j) v[mask * d + j] += out[j];
    }
    for (std::size_t j = 0; j < d; ++j) v[mask * d + j] /= static_cast<double>(background.rows);
  }

  // Subset weights |S|! (F - |S| - 1)! / F!
  std::vector<double> weight(f);
  for (std::size_t s = 0; s < f; ++s) {
    long double w = 1.0L;
    for (std::size_t i = 1; i <= s; ++i) w *= i;
    for (std::size_t i = 1; i <= f - s - 1; ++i) w *= i;
    for (std::size_t i = 1; i <= f; ++i) w /= i;
    weight[s] = static_cast<double>(w);
  }

  ShapExplanation ex;
  ex.n_features = f;
  ex.n_outputs = d;
  ex.phi0.assign(v.begin(), v.begin() + d);
  ex.phi.assign(f * d, 0.0);
  for (std::size_t i = 0; i < f; ++i) {
    const std::size_t bit = std::size_t{1} << i;
    for (std::size_t mask = 0; mask < n_masks; ++mask) {
      if (mask & bit) continue;
      double w = weight[static_cast<std::size_t>(std::popcount(mask))];
      for (std::size_t j = 0; j < d; ++j)
        ex.phi[i * d + j] += w * (v[(mask | bit) * d + j] - v[mask * d + j]);
    }
  }
  return ex;
}

// ---------------------------------------------------------------------------
// Interventional TreeSHAP
// ---------------------------------------------------------------------------

namespace {

// Hot-path tree layout: one contiguous node record per visit. For leaves
// (feature < 0) `threshold` holds the leaf value.
struct PackedNode {
  double threshold;
  std::int32_t feature;
  std::int32_t left;
  std::int32_t right;
};

struct PackedTree {
  std::vector<PackedNode> nodes;

  explicit PackedTree(const Tree& t) {
    nodes.resize(t.n_nodes());
    for (std::size_t i = 0; i < t.n_nodes(); ++i) {
      nodes[i].feature = t.feature[i];
      nodes[i].threshold = t.is_leaf(i) ? t.value[i] : t.threshold[i];
      nodes[i].left = t.left[i];
      nodes[i].right = t.right[i];
    }
  }
};

// Walks every path of the tree reachable by some coalition of the (x, b)
// pair, tracking the unique diverging features followed on x's side (xf) and
// on b's side (bf); each reachable leaf contributes closed-form Shapley mass
// to those features. x's routing decisions are cached per (tree, x) since
// they are shared across all background rows.
struct PairTraversal {
  const PackedNode* nodes = nullptr;
  const std::uint8_t* x_goes_left = nullptr;
  const double* b = nullptr;
  double* phi = nullptr;  // F accumulators
  std::int16_t xf[kMaxPathDepth];
  std::int16_t bf[kMaxPathDepth];

  struct Frame {
    std::int32_t node;
    std::int16_t nx;
    std::int16_t nb;
    // Feature to install at bf[nb - 1] when the frame resumes; the x-side
    // subtree explored in between reuses that slot.
    std::int16_t pending;
  };
  Frame stack[kMaxPathDepth * 2];

  void run() {
    const auto& wt = weight_table();
    int top = 0;
    stack[top++] = {0, 0, 0, -1};
    while (top > 0) {
      Frame frame = stack[--top];
      std::int32_t node = frame.node;
      int nx = frame.nx;
      int nb = frame.nb;
      if (frame.pending >= 0) bf[nb - 1] = frame.pending;
      for (;;) {
        const PackedNode& n = nodes[node];
        if (n.feature < 0) {
          const double value = n.threshold;
          if (nx > 0) {
            double w = wt.w[nx - 1][nb] * value;
            for (int i = 0; i < nx; ++i) phi[xf[i]] += w;
          }
          if (nb > 0) {
            double w = wt.w[nb - 1][nx] * value;
            for (int i = 0; i < nb; ++i) phi[bf[i]] -= w;
          }
          break;
        }
        const bool x_left = x_goes_left[node];
        const bool b_left = b[n.feature] <= n.threshold;
        if (x_left == b_left) {
          node = x_left ? n.left : n.right;
          continue;
        }
        const std::int32_t x_child = x_left ? n.left : n.right;
        const std::int32_t b_child = b_left ? n.left : n.right;
        const std::int16_t f = static_cast<std::int16_t>(n.feature);
        bool constrained = false;
        for (int i = 0; i < nx; ++i)
          if (xf[i] == f) {
            node = x_child;
            constrained = true;
            break;
          }
        if (constrained) continue;
        for (int i = 0; i < nb; ++i)
          if (bf[i] == f) {
            node = b_child;
            constrained = true;
            break;
          }
        if (constrained) continue;
        if (nx + nb + 1 >= kMaxPathDepth)
          throw Error(Errc::too_many_features, "tree path exceeds supported depth");
        // Defer the b-side branch; bf[nb] stays valid because descendants
        // only append past it.
        bf[nb] = f;
        stack[top++] = {b_child, static_cast<std::int16_t>(nx),
                        static_cast<std::int16_t>(nb + 1)};
        xf[nx] = f;
        ++nx;
        node = x_child;
      }
    }
  }
};

// Read-only packed forest shared by all worker threads of explain_dataset.
struct PackedForest {
  std::vector<std::vector<PackedTree>> dims;
  std::size_t max_nodes = 0;

  explicit PackedForest(const RandomForest& forest) {
    for (const auto& trees : forest.dim_trees()) {
      std::vector<PackedTree> packed;
      packed.reserve(trees.size());
      for (const Tree& t : trees) {
        packed.emplace_back(t);
        max_nodes = std::max(max_nodes, t.n_nodes());
      }
      dims.push_back(std::move(packed));
    }
  }
};

// Accumulates raw per-(tree, background-row) contributions for one action
// dimension into phi (length F); caller divides by n_trees * B. `x_dirs` is
// caller-provided scratch of at least max_nodes bytes.
void accumulate_dim(const std::vector<PackedTree>& trees, std::span<const double> x,
                    const Background& background, double* phi,
                    std::uint8_t* x_dirs) {
  PairTraversal walk;
  walk.phi = phi;
  for (const PackedTree& t : trees) {
    const PackedNode* nodes = t.nodes.data();
    const std::size_t n_nodes = t.nodes.size();
    for (std::size_t n = 0; n < n_nodes; ++n)
      x_dirs[n] = nodes[n].feature >= 0 && x[nodes[n].feature] <= nodes[n].threshold;
    walk.nodes = nodes;
    walk.x_goes_left = x_dirs;
    for (std::size_t b = 0; b < background.rows; ++b) {
      walk.b = background.row(b).data();
      walk.run();
    }
  }
}

std::vector<double> background_mean_prediction(const RandomForest& forest,
                                               const Background& background) {
  std::vector<double> phi0(forest.n_outputs(), 0.0);
  std::vector<double> out(forest.n_outputs());
  for (std::size_t b = 0; b < background.rows; ++b) {
    forest.predict_into(background.row(b), out);
    for (std::size_t j = 0; j < out.size(); ++j) phi0[j] += out[j];
  }
  for (double& v : phi0) v /= static_cast<double>(background.rows);
  return phi0;
}

}  // namespace

ShapExplanation tree_shap(const RandomForest& forest, std::span<const double> x,
                          const Background& background) {
  const std::size_t f = forest.n_features();
  const std::size_t d = forest.n_outputs();
  if (x.size() != f)
    throw Error(Errc::dimension_mismatch,
                "state has " + std::to_string(x.size()) + " entries, forest expects " +
                    std::to_string(f));
  if (background.rows == 0) throw Error(Errc::empty_background, "background is empty");
  if (background.cols != f)
    throw Error(Errc::dimension_mismatch, "background column count does not match the forest");

  ShapExplanation ex;
  ex.n_features = f;
  ex.n_outputs = d;
  ex.phi0 = background_mean_prediction(forest, background);
  ex.phi.assign(f * d, 0.0);
  std::vector<double> dim_phi(f);
  for (std::size_t j = 0; j < d; ++j) {
    std::fill(dim_phi.begin(), dim_phi.end(), 0.0);
    accumulate_dim(forest.dim_trees()[j], x, background, dim_phi.data());
    const double scale =
        1.0 / (static_cast<double>(forest.dim_trees()[j].size()) *
               static_cast<double>(background.rows));
    for (std::size_t i = 0; i < f; ++i) ex.phi[i * d + j] = dim_phi[i] * scale;
  }
  return ex;
}

ShapMatrix explain_dataset(const RandomForest& forest, const Dataset& dataset,
                           const Background& background, int n_threads) {
  if (dataset.n_features() != forest.n_features() ||
      dataset.feature_names() != forest.feature_names())
    throw Error(Errc::schema_mismatch, "dataset schema does not match the model");
  if (background.rows == 0) throw Error(Errc::empty_background, "background is empty");

  const std::size_t f = forest.n_features();
  const std::size_t d = forest.n_outputs();
  ShapMatrix m;
  m.rows = dataset.size();
  m.n_features = f;
  m.n_outputs = d;
  m.feature_names = forest.feature_names();
  m.action_names = forest.action_names();
  m.phi0 = background_mean_prediction(forest, background);
  m.values.assign(m.rows * f * d, 0.0);

  parallel_for(dataset.size(), n_threads, [&](std::size_t i) {
    thread_local std::vector<double> dim_phi;
    dim_phi.assign(f, 0.0);
    double* out = m.values.data() + i * f * d;
    auto x = dataset.state_row(i);
    for (std::size_t j = 0; j < d; ++j) {
      std::fill(dim_phi.begin(), dim_phi.end(), 0.0);
      accumulate_dim(forest.dim_trees()[j], x, background, dim_phi.data());
      const double scale =
          1.0 / (static_cast<double>(forest.dim_trees()[j].size()) *
                 static_cast<double>(background.rows));
      for (std::size_t k = 0; k < f; ++k) out[k * d + j] = dim_phi[k] * scale;
    }
  });
  return m;
}

// ---------------------------------------------------------------------------
// shap.csv
// ---------------------------------------------------------------------------

namespace {

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

}  // namespace

void save_shap_csv(const ShapMatrix& shap, const Dataset& dataset, const std::string& path) {
  if (dataset.size() != shap.rows)
    throw Error(Errc::length_mismatch, "dataset and SHAP matrix row counts differ");
  std::ofstream out(path);
  if (!out) throw Error(Errc::io_failure, "cannot open '" + path + "' for writing");
  bool first = true;
  for (std::size_t f = 0; f < shap.n_features; ++f)
    for (std::size_t j = 0; j < shap.n_outputs; ++j) {
      if (!first) out << ',';
      out << shap.feature_names[f] << "__" << shap.action_names[j];
      first = false;
    }
  for (std::size_t j = 0; j < shap.n_outputs; ++j)
    out << ",phi0__" << shap.action_names[j];
  if (dataset.has_labels()) out << ",label";
  if (dataset.has_agent_ids()) out << ",agent_id";
  out << '\n';
  for (std::size_t i = 0; i < shap.rows; ++i) {
    auto row = shap.row(i);
    first = true;
    for (double v : row) {
      if (!first) out << ',';
      out << format_double(v);
      first = false;
    }
    for (double v : shap.phi0) out << ',' << format_double(v);
    if (dataset.has_labels()) out << ',' << dataset.label(i);
    if (dataset.has_agent_ids()) out << ',' << dataset.agent_id(i);
    out << '\n';
  }
  if (!out) throw Error(Errc::io_failure, "write to '" + path + "' failed");
}

LoadedShap load_shap_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::io_failure, "cannot open '" + path + "' for reading");
  std::string line;
  if (!std::getline(in, line))
    throw Error(Errc::missing_column, "file '" + path + "' has no header row");
  if (!line.empty() && line.back() == '\r') line.pop_back();

  std::vector<std::string> header;
  {
    std::size_t start = 0;
    for (;;) {
      std::size_t pos = line.find(',', start);
      if (pos == std::string::npos) {
        header.push_back(line.substr(start));
        break;
      }
      header.push_back(line.substr(start, pos - start));
      start = pos + 1;
    }
  }

  LoadedShap loaded;
  ShapMatrix& m = loaded.matrix;
  std::vector<std::size_t> phi_cols, phi0_cols;
  std::size_t label_col = static_cast<std::size_t>(-1);
  std::vector<std::string> actions_seen;
  for (std::size_t c = 0; c < header.size(); ++c) {
    const std::string& h = header[c];
    if (h == "label") {
      label_col = c;
      continue;
    }
    if (h == "agent_id" || h == "timestamp" || h == "row_index") continue;
    std::size_t sep = h.find("__");
    if (sep == std::string::npos)
      throw Error(Errc::missing_column, "unexpected column '" + h + "' in '" + path + "'");
    std::string feat = h.substr(0, sep);
    std::string act = h.substr(sep + 2);
    if (feat == "phi0") {
      phi0_cols.push_back(c);
      continue;
    }
    phi_cols.push_back(c);
    if (std::find(actions_seen.begin(), actions_seen.end(), act) == actions_seen.end())
      actions_seen.push_back(act);
    if (std::find(m.feature_names.begin(), m.feature_names.end(), feat) ==
        m.feature_names.end())
      m.feature_names.push_back(feat);
  }
  m.action_names = actions_seen;
  m.n_outputs = std::max<std::size_t>(1, actions_seen.size());
  m.n_features = m.feature_names.size();
  if (phi_cols.empty())
    throw Error(Errc::missing_column, "no '<feature>__<action>' columns in '" + path + "'");
  if (m.n_features * m.n_outputs != phi_cols.size())
    throw Error(Errc::schema_mismatch, "SHAP columns do not form a full feature x action grid");

  std::size_t line_no = 1;
  std::vector<std::string> cells;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    cells.clear();
    std::size_t start = 0;
    for (;;) {
      std::size_t pos = line.find(',', start);
      if (pos == std::string::npos) {
        cells.push_back(line.substr(start));
        break;
      }
      cells.push_back(line.substr(start, pos - start));
      start = pos + 1;
    }
    if (cells.size() != header.size())
      throw Error(Errc::type_mismatch, "line " + std::to_string(line_no) +
                                           " has wrong cell count in '" + path + "'");
    auto parse = [&](const std::string& cell) {
      double v = 0.0;
      auto res = std::from_chars(cell.data(), cell.data() + cell.size(), v);
      if (res.ec != std::errc() || res.ptr != cell.data() + cell.size() || !std::isfinite(v))
        throw Error(Errc::type_mismatch,
                    "bad numeric cell '" + cell + "' at line " + std::to_string(line_no));
      return v;
    };
    for (std::size_t c : phi_cols) m.values.push_back(parse(cells[c]));
    if (m.phi0.empty())
      for (std::size_t c : phi0_cols) m.phi0.push_back(parse(cells[c]));
    if (label_col != static_cast<std::size_t>(-1))
      loaded.labels.push_back(static_cast<int>(parse(cells[label_col])));
    ++m.rows;
  }
  return loaded;
}

}  // namespace kshap
