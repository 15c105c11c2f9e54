#include "kshap/cli.hpp"

#include <charconv>
#include <chrono>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>

#include <CLI11.hpp>
#include <json.hpp>

#include "kshap/clustering.hpp"
#include "kshap/config_io.hpp"
#include "kshap/dataset.hpp"
#include "kshap/forest.hpp"
#include "kshap/metrics.hpp"
#include "kshap/shap.hpp"
#include "kshap/simulator.hpp"

namespace kshap {

namespace {

using nlohmann::json;

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

double elapsed_seconds(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

// ---------------------------------------------------------------------------
// JSON config file merged under CLI flags (flags override file values)
// ---------------------------------------------------------------------------

class ConfigOverlay {
 public:
  void load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error(Errc::invalid_config, "cannot open config file '" + path + "'");
    try {
      values_ = json::parse(in);
    } catch (const json::exception& e) {
      throw Error(Errc::invalid_config,
                  "config file '" + path + "' is not valid JSON: " + e.what());
    }
    if (!values_.is_object())
      throw Error(Errc::invalid_config, "config file must hold a JSON object");
  }

  // Applies file values as option defaults; keys must match long flag names.
  void apply(CLI::App* cmd) {
    if (values_.is_null()) return;
    for (const auto& [key, value] : values_.items()) {
      CLI::Option* opt = nullptr;
      try {
        opt = cmd->get_option("--" + key);
      } catch (const CLI::OptionNotFound&) {
        throw Error(Errc::invalid_config,
                    "unknown key '" + key + "' in config file for '" + cmd->get_name() + "'");
      }
      std::string text = value.is_string() ? value.get<std::string>() : value.dump();
      opt->default_val(text);
    }
  }

 private:
  json values_;
};

// ---------------------------------------------------------------------------
// Shared option bundles
// ---------------------------------------------------------------------------

struct CommonOpts {
  std::uint64_t seed = 0;
  int threads = 0;
  std::string config_path;
};

void add_common(CLI::App* cmd, CommonOpts& opts) {
  cmd->add_option("--seed", opts.seed, "Master seed");
  cmd->add_option("--threads", opts.threads,
                  "Worker threads (0 = machine parallelism or KSHAP_THREADS)");
  cmd->add_option("--config", opts.config_path, "JSON config file; flags override its values");
}

struct ForestOpts {
  int n_trees = 100;
  int max_depth = 16;
  int min_samples_leaf = 5;
  int max_features = 0;

  ForestParams params(std::uint64_t seed) const {
    ForestParams p;
    p.n_trees = n_trees;
    p.max_depth = max_depth;
    p.min_samples_leaf = min_samples_leaf;
    p.max_features = max_features;
    p.seed = seed;
    return p;
  }
  void echo(json& config) const {
    config["n-trees"] = n_trees;
    config["max-depth"] = max_depth;
    config["min-samples-leaf"] = min_samples_leaf;
    config["max-features"] = max_features;
  }
};

void add_forest(CLI::App* cmd, ForestOpts& opts) {
  cmd->add_option("--n-trees", opts.n_trees, "Trees per action dimension");
  cmd->add_option("--max-depth", opts.max_depth, "Maximum tree depth");
  cmd->add_option("--min-samples-leaf", opts.min_samples_leaf, "Minimum samples per leaf");
  cmd->add_option("--max-features", opts.max_features,
                  "Features considered per split (0 = ceil(sqrt(F)))");
}

int parse_k(const std::string& text) {
  if (text == "auto") return 0;
  int k = 0;
  auto res = std::from_chars(text.data(), text.data() + text.size(), k);
  if (res.ec != std::errc() || res.ptr != text.data() + text.size() || k < 1)
    throw Error(Errc::invalid_config, "--k must be a positive integer or 'auto'");
  return k;
}

// ---------------------------------------------------------------------------
// Output helpers
// ---------------------------------------------------------------------------

void write_labels_csv(const std::string& path, const std::vector<int>& clusters,
                      const std::vector<int>& truth_labels) {
  std::ofstream out(path);
  if (!out) throw Error(Errc::io_failure, "cannot open '" + path + "' for writing");
  out << "row_index,cluster";
  if (!truth_labels.empty()) out << ",label";
  out << '\n';
  for (std::size_t i = 0; i < clusters.size(); ++i) {
    out << i << ',' << clusters[i];
    if (!truth_labels.empty()) out << ',' << truth_labels[i];
    out << '\n';
  }
  if (!out) throw Error(Errc::io_failure, "write to '" + path + "' failed");
}

struct LoadedLabels {
  std::vector<int> clusters;
  std::vector<int> truth;  // empty when absent
};

LoadedLabels load_labels_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::io_failure, "cannot open '" + path + "' for reading");
  std::string line;
  if (!std::getline(in, line))
    throw Error(Errc::missing_column, "labels file '" + path + "' has no header");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  std::vector<std::string> header;
  std::size_t start = 0;
  for (;;) {
    std::size_t pos = line.find(',', start);
    header.push_back(line.substr(start, pos - start));
    if (pos == std::string::npos) break;
    start = pos + 1;
  }
  long cluster_col = -1, label_col = -1;
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (header[c] == "cluster") cluster_col = static_cast<long>(c);
    if (header[c] == "label") label_col = static_cast<long>(c);
  }
  if (cluster_col < 0)
    throw Error(Errc::missing_column, "labels file '" + path + "' has no 'cluster' column");
  LoadedLabels out;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> cells;
    start = 0;
    for (;;) {
      std::size_t pos = line.find(',', start);
      cells.push_back(line.substr(start, pos - start));
      if (pos == std::string::npos) break;
      start = pos + 1;
    }
    auto parse_int = [&](const std::string& cell) {
      int v = 0;
      auto res = std::from_chars(cell.data(), cell.data() + cell.size(), v);
      if (res.ec != std::errc() || res.ptr != cell.data() + cell.size())
        throw Error(Errc::type_mismatch, "bad integer '" + cell + "' at line " +
                                             std::to_string(line_no) + " of '" + path + "'");
      return v;
    };
    out.clusters.push_back(parse_int(cells.at(cluster_col)));
    if (label_col >= 0) out.truth.push_back(parse_int(cells.at(label_col)));
  }
  return out;
}

void write_elbow_csv(const std::string& path, const ElbowReport& report) {
  std::ofstream out(path);
  if (!out) throw Error(Errc::io_failure, "cannot open '" + path + "' for writing");
  out << "k,distortion,inertia\n";
  for (std::size_t i = 0; i < report.ks.size(); ++i) {
    out << report.ks[i] << ',' << format_double(report.distortions[i]) << ','
        << (i < report.inertias.size() ? format_double(report.inertias[i]) : "") << '\n';
  }
  if (!out) throw Error(Errc::io_failure, "write to '" + path + "' failed");
}

json metric_or_null(std::optional<double> v) {
  return v ? json(*v) : json(nullptr);
}

void write_report(const std::string& path, const json& report) {
  std::ofstream out(path);
  if (!out) throw Error(Errc::io_failure, "cannot open '" + path + "' for writing");
  out << report.dump(2) << '\n';
  if (!out) throw Error(Errc::io_failure, "write to '" + path + "' failed");
}

json base_report(const std::string& algorithm, std::uint64_t seed) {
  json report;
  report["version"] = kVersion;
  report["algorithm"] = algorithm;
  report["seed"] = seed;
  report["schemas"] = builtin_schema_ids();
  report["deviations"] = deviations();
  return report;
}

// ---------------------------------------------------------------------------
// Subcommand state
// ---------------------------------------------------------------------------

struct SimulateCmd {
  CommonOpts common;
  std::string scenario;
  std::string out;
  double horizon = 0.0;  // 0 = scenario/config default
};

struct PdGenCmd {
  CommonOpts common;
  std::string scenario = "defect-vs-cooperate";
  int rounds = 200;
  std::string state_mode = "full";
  std::string out;
};

struct TrainCmd {
  CommonOpts common;
  ForestOpts forest;
  std::string data;
  std::string out;
  bool oob = false;
};

struct ExplainCmd {
  CommonOpts common;
  std::string model;
  std::string data;
  std::size_t background_size = 100;
  std::string out;
};

struct ClusterCmd {
  CommonOpts common;
  std::string shap;
  std::string k_text = "auto";
  int k_min = 2;
  int k_max = 6;
  int restarts = 10;
  int action_dim = -1;
  std::string out;
  std::string curve_out;
};

struct EvaluateCmd {
  CommonOpts common;
  std::string data;
  std::string labels;
  std::string points;
  std::string report;
  std::string algorithm = "kshap";
};

struct PipelineCmd {
  CommonOpts common;
  ForestOpts forest;
  std::string data;
  std::string k_text = "auto";
  int k_min = 2;
  int k_max = 6;
  int restarts = 10;
  int action_dim = -1;
  std::size_t background_size = 100;
  std::string out;
  std::string report;
  std::string model_out;
  std::string shap_out;
  std::string elbow_out;
};

struct SweepCmd {
  CommonOpts common;
  ForestOpts forest;
  std::string data;
  int k_min = 2;
  int k_max = 6;
  std::vector<std::string> algorithms = {"kshap", "kmeans-raw", "em"};
  int restarts = 10;
  std::size_t background_size = 100;
  std::string out;
};

// ---------------------------------------------------------------------------
// Handlers
// ---------------------------------------------------------------------------

int cmd_simulate(const SimulateCmd& cmd) {
  std::string stage = "configure";
  try {
    MarketConfig config;
    if (!cmd.scenario.empty()) {
      if (cmd.scenario != "pi3-analog")
        throw Error(Errc::invalid_config, "unknown scenario '" + cmd.scenario +
                                              "' (built-in: pi3-analog)");
      config = pi3_analog_config(cmd.common.seed);
    } else if (!cmd.common.config_path.empty()) {
      config = market_config_from_file(cmd.common.config_path);
      config.seed = cmd.common.seed != 0 ? cmd.common.seed : config.seed;
    } else {
      throw Error(Errc::invalid_config, "simulate needs --config or --scenario");
    }
    if (cmd.horizon > 0.0) config.horizon = cmd.horizon;

    stage = "simulate";
    auto start = std::chrono::steady_clock::now();
    Dataset data = run_market(config);
    stage = "write-output";
    save_csv(data, cmd.out);
    std::cerr << "kshap simulate: " << data.size() << " rows in "
              << format_double(elapsed_seconds(start)) << "s -> " << cmd.out << '\n';
    return 0;
  } catch (const Error& e) {
    if (e.code() == Errc::invalid_config) {
      std::cerr << "kshap simulate: " << e.what() << '\n';
      return 2;
    }
    std::cerr << "kshap simulate: stage " << stage << ": " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "kshap simulate: stage " << stage << ": " << e.what() << '\n';
    return 1;
  }
}

int cmd_pd_gen(const PdGenCmd& cmd) {
  std::string stage = "configure";
  try {
    PdScenario scenario = pd_scenario_from_string(cmd.scenario);
    PdStateMode mode;
    if (cmd.state_mode == "null")
      mode = PdStateMode::null_state;
    else if (cmd.state_mode == "full")
      mode = PdStateMode::full;
    else
      throw Error(Errc::invalid_config, "--state-mode must be 'null' or 'full'");
    stage = "generate";
    Dataset data = run_prisoners_dilemma(scenario, cmd.rounds, mode, cmd.common.seed);
    stage = "write-output";
    save_csv(data, cmd.out);
    std::cerr << "kshap pd-gen: " << data.size() << " rows -> " << cmd.out << '\n';
    return 0;
  } catch (const Error& e) {
    if (e.code() == Errc::invalid_config) {
      std::cerr << "kshap pd-gen: " << e.what() << '\n';
      return 2;
    }
    std::cerr << "kshap pd-gen: stage " << stage << ": " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "kshap pd-gen: stage " << stage << ": " << e.what() << '\n';
    return 1;
  }
}

int cmd_train(const TrainCmd& cmd) {
  std::string stage = "load-data";
  try {
    Dataset data = load_csv(cmd.data);
    stage = "fit-forest";
    auto start = std::chrono::steady_clock::now();
    ForestParams params = cmd.forest.params(cmd.common.seed);
    params.compute_oob = cmd.oob;
    RandomForest forest = RandomForest::fit(data.without_metadata(), params);
    stage = "write-model";
    forest.save(cmd.out);
    std::cerr << "kshap train: " << data.size() << " rows, " << forest.n_outputs()
              << " action dims in " << format_double(elapsed_seconds(start)) << "s -> "
              << cmd.out << '\n';
    return 0;
  } catch (const Error& e) {
    if (e.code() == Errc::invalid_config) {
      std::cerr << "kshap train: " << e.what() << '\n';
      return 2;
    }
    std::cerr << "kshap train: stage " << stage << ": " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "kshap train: stage " << stage << ": " << e.what() << '\n';
    return 1;
  }
}

int cmd_explain(const ExplainCmd& cmd) {
  std::string stage = "load-model";
  try {
    RandomForest forest = RandomForest::load(cmd.model);
    stage = "load-data";
    Dataset data = load_csv(cmd.data);
    stage = "background";
    Background background = make_background(data, cmd.background_size, cmd.common.seed);
    stage = "explain";
    auto start = std::chrono::steady_clock::now();
    ShapMatrix shap = explain_dataset(forest, data.without_metadata(), background,
                                      cmd.common.threads);
    stage = "write-output";
    save_shap_csv(shap, data, cmd.out);
    std::cerr << "kshap explain: " << shap.rows << " rows x " << shap.dims()
              << " dims in " << format_double(elapsed_seconds(start)) << "s -> " << cmd.out
              << '\n';
    return 0;
  } catch (const Error& e) {
    if (e.code() == Errc::invalid_config) {
      std::cerr << "kshap explain: " << e.what() << '\n';
      return 2;
    }
    std::cerr << "kshap explain: stage " << stage << ": " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "kshap explain: stage " << stage << ": " << e.what() << '\n';
    return 1;
  }
}

int cmd_cluster(const ClusterCmd& cmd) {
  std::string stage = "load-shap";
  try {
    int k = parse_k(cmd.k_text);
    LoadedShap loaded = load_shap_csv(cmd.shap);

    const std::vector<double>* points = &loaded.matrix.values;
    std::vector<double> sliced;
    std::size_t dims = loaded.matrix.dims();
    if (cmd.action_dim >= 0) {
      if (static_cast<std::size_t>(cmd.action_dim) >= loaded.matrix.n_outputs)
        throw Error(Errc::invalid_config, "--action-dim out of range");
      sliced = loaded.matrix.action_dim_slice(cmd.action_dim);
      points = &sliced;
      dims = loaded.matrix.n_features;
    }

    std::optional<ElbowReport> elbow;
    if (k == 0) {
      stage = "elbow";
      elbow = elbow_select_k(*points, loaded.matrix.rows, dims, cmd.k_min, cmd.k_max,
                             cmd.common.seed, cmd.restarts, cmd.common.threads);
      k = elbow->chosen_k;
      std::cerr << "kshap cluster: elbow chose k = " << k
                << (elbow->low_confidence ? " (low knee confidence)" : "") << '\n';
    }
    stage = "kmeans";
    KMeansModel model = kmeans_fit(*points, loaded.matrix.rows, dims, k, cmd.common.seed,
                                   cmd.restarts, 300, cmd.common.threads);
    stage = "write-output";
    write_labels_csv(cmd.out, model.assignments, loaded.labels);
    if (elbow && !cmd.curve_out.empty()) write_elbow_csv(cmd.curve_out, *elbow);
    std::cerr << "kshap cluster: k = " << k << ", inertia = " << format_double(model.inertia)
              << " -> " << cmd.out << '\n';
    return 0;
  } catch (const Error& e) {
    if (e.code() == Errc::invalid_config) {
      std::cerr << "kshap cluster: " << e.what() << '\n';
      return 2;
    }
    std::cerr << "kshap cluster: stage " << stage << ": " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "kshap cluster: stage " << stage << ": " << e.what() << '\n';
    return 1;
  }
}

int cmd_evaluate(const EvaluateCmd& cmd) {
  std::string stage = "load-data";
  try {
    Dataset data = load_csv(cmd.data);
    stage = "load-labels";
    LoadedLabels labels = load_labels_csv(cmd.labels);
    if (labels.clusters.size() != data.size())
      throw Error(Errc::length_mismatch, "labels row count does not match the dataset");

    json report = base_report(cmd.algorithm, cmd.common.seed);
    std::size_t k = 0;
    {
      std::set<int> distinct(labels.clusters.begin(), labels.clusters.end());
      k = distinct.size();
    }
    report["k"] = k;
    report["T"] = data.size();
    report["schema_id"] = data.schema_id();

    stage = "label-metrics";
    std::optional<double> purity_v, ari_v, nmi_v;
    if (data.has_labels()) {
      purity_v = purity(labels.clusters, data.labels());
      ari_v = ari(labels.clusters, data.labels());
      nmi_v = nmi(labels.clusters, data.labels());
    }
    report["purity"] = metric_or_null(purity_v);
    report["ari"] = metric_or_null(ari_v);
    report["nmi"] = metric_or_null(nmi_v);

    stage = "silhouette";
    std::optional<double> silhouette_v;
    if (!cmd.points.empty()) {
      LoadedShap pts = load_shap_csv(cmd.points);
      if (pts.matrix.rows != data.size())
        throw Error(Errc::length_mismatch, "points row count does not match the dataset");
      if (k >= 2)
        silhouette_v = silhouette(pts.matrix.values, pts.matrix.rows, pts.matrix.dims(),
                                  labels.clusters, cmd.common.threads);
    }
    report["silhouette"] = metric_or_null(silhouette_v);

    stage = "utility";
    UtilityResult util = utility(data, labels.clusters, UtilityParams{}, cmd.common.seed);
    report["utility"] = util.value;
    report["utility_skipped_rows"] = util.skipped;
    report["utility_fallback_clusters"] = util.fallback_clusters;

    report["config"] = {{"data", cmd.data},
                        {"labels", cmd.labels},
                        {"points", cmd.points},
                        {"algorithm", cmd.algorithm},
                        {"seed", cmd.common.seed}};
    stage = "write-report";
    write_report(cmd.report, report);
    std::cerr << "kshap evaluate: report -> " << cmd.report << '\n';
    return 0;
  } catch (const Error& e) {
    if (e.code() == Errc::invalid_config) {
      std::cerr << "kshap evaluate: " << e.what() << '\n';
      return 2;
    }
    std::cerr << "kshap evaluate: stage " << stage << ": " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "kshap evaluate: stage " << stage << ": " << e.what() << '\n';
    return 1;
  }
}

int cmd_pipeline(const PipelineCmd& cmd) {
  std::string stage = "load-data";
  try {
    auto start = std::chrono::steady_clock::now();
    Dataset data = load_csv(cmd.data);

    PipelineOptions options;
    options.k = parse_k(cmd.k_text);
    options.elbow_k_min = cmd.k_min;
    options.elbow_k_max = cmd.k_max;
    options.forest = cmd.forest.params(0);
    options.background_size = cmd.background_size;
    options.restarts = cmd.restarts;
    options.action_dim = cmd.action_dim;
    options.seed = cmd.common.seed;
    options.n_threads = cmd.common.threads;

    stage = "pipeline";
    PipelineResult result = kshap_pipeline(data, options);

    stage = "metrics";
    json report = base_report("kshap", cmd.common.seed);
    report["T"] = data.size();
    report["k"] = result.kmeans.k;
    report["schema_id"] = data.schema_id();
    if (result.elbow) {
      report["chosen_k"] = result.elbow->chosen_k;
      report["knee_low_confidence"] = result.elbow->low_confidence;
    }
    report["inertia"] = result.kmeans.inertia;
    std::optional<double> purity_v, ari_v, nmi_v;
    if (data.has_labels()) {
      purity_v = purity(result.labels, data.labels());
      ari_v = ari(result.labels, data.labels());
      nmi_v = nmi(result.labels, data.labels());
    }
    report["purity"] = metric_or_null(purity_v);
    report["ari"] = metric_or_null(ari_v);
    report["nmi"] = metric_or_null(nmi_v);
    report["silhouette"] = json(nullptr);  // available via evaluate --points
    report["utility"] = json(nullptr);

    json config;
    config["data"] = cmd.data;
    config["k"] = cmd.k_text;
    config["k-min"] = cmd.k_min;
    config["k-max"] = cmd.k_max;
    config["restarts"] = cmd.restarts;
    config["background-size"] = cmd.background_size;
    config["action-dim"] = cmd.action_dim;
    config["seed"] = cmd.common.seed;
    cmd.forest.echo(config);
    config["out"] = cmd.out;
    config["report"] = cmd.report;
    std::string elbow_out = cmd.elbow_out;
    if (result.elbow && elbow_out.empty()) {
      elbow_out = cmd.report;
      std::size_t dot = elbow_out.rfind(".json");
      if (dot != std::string::npos) elbow_out.resize(dot);
      elbow_out += "_elbow.csv";
    }
    config["elbow-out"] = elbow_out;
    config["model"] = cmd.model_out;
    config["shap"] = cmd.shap_out;
    report["config"] = std::move(config);

    stage = "write-output";
    write_labels_csv(cmd.out, result.labels,
                     data.has_labels() ? data.labels() : std::vector<int>{});
    write_report(cmd.report, report);
    if (result.elbow) write_elbow_csv(elbow_out, *result.elbow);
    if (!cmd.model_out.empty()) result.forest.save(cmd.model_out);
    if (!cmd.shap_out.empty()) save_shap_csv(result.shap, data, cmd.shap_out);

    std::cerr << "kshap pipeline: T = " << data.size() << ", k = " << result.kmeans.k
              << ", " << format_double(elapsed_seconds(start)) << "s -> " << cmd.out << '\n';
    return 0;
  } catch (const Error& e) {
    if (e.code() == Errc::invalid_config) {
      std::cerr << "kshap pipeline: " << e.what() << '\n';
      return 2;
    }
    std::cerr << "kshap pipeline: stage " << stage << ": " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "kshap pipeline: stage " << stage << ": " << e.what() << '\n';
    return 1;
  }
}

int cmd_sweep(const SweepCmd& cmd) {
  std::string stage = "load-data";
  try {
    auto start = std::chrono::steady_clock::now();
    for (const std::string& alg : cmd.algorithms)
      if (alg != "kshap" && alg != "kmeans-raw" && alg != "em")
        throw Error(Errc::invalid_config,
                    "unknown algorithm '" + alg + "' (use kshap, kmeans-raw, em)");
    if (cmd.k_max < cmd.k_min)
      throw Error(Errc::invalid_config, "--k-max must be >= --k-min");

    Dataset data = load_csv(cmd.data);
    const bool labeled = data.has_labels();

    std::ofstream out(cmd.out);
    if (!out) throw Error(Errc::io_failure, "cannot open '" + cmd.out + "' for writing");
    out << "algorithm,k,metric,value,seed\n";
    auto emit = [&](const std::string& alg, int k, const std::string& metric, double v) {
      out << alg << ',' << k << ',' << metric << ',' << format_double(v) << ','
          << cmd.common.seed << '\n';
    };

    // Raw standardized state-action rows serve both baselines.
    stage = "prepare";
    std::vector<double> raw;
    std::size_t raw_dims = data.n_features() + data.n_actions();
    bool need_raw = false;
    for (const std::string& alg : cmd.algorithms)
      need_raw = need_raw || alg != "kshap";
    if (need_raw) raw = state_action_matrix(data, true);

    for (const std::string& alg : cmd.algorithms) {
      // One SHAP embedding per sweep; k only affects the clustering stage.
      std::optional<ShapMatrix> shap;
      if (alg == "kshap") {
        stage = "kshap-embedding";
        PipelineOptions options;
        options.k = std::max(1, cmd.k_min);
        options.forest = cmd.forest.params(0);
        options.background_size = cmd.background_size;
        options.restarts = cmd.restarts;
        options.seed = cmd.common.seed;
        options.n_threads = cmd.common.threads;
        PipelineResult first = kshap_pipeline(data, options);
        shap = std::move(first.shap);
      }

      for (int k = cmd.k_min; k <= cmd.k_max; ++k) {
        stage = alg + " k=" + std::to_string(k);
        std::vector<int> clusters;
        const std::vector<double>* points = nullptr;
        std::size_t dims = 0;
        std::uint64_t run_seed = mix64(cmd.common.seed, std::hash<std::string>{}(alg), k);
        if (alg == "kshap") {
          KMeansModel m = kmeans_fit(shap->values, shap->rows, shap->dims(), k, run_seed,
                                     cmd.restarts, 300, cmd.common.threads);
          clusters = std::move(m.assignments);
          points = &shap->values;
          dims = shap->dims();
        } else if (alg == "kmeans-raw") {
          KMeansModel m = kmeans_fit(raw, data.size(), raw_dims, k, run_seed, cmd.restarts,
                                     300, cmd.common.threads);
          clusters = std::move(m.assignments);
          points = &raw;
          dims = raw_dims;
        } else {
          EMKClusteringModel m = em_k_clustering(data.without_metadata(), k, run_seed,
                                                 cmd.restarts);
          clusters = std::move(m.assignments);
          points = &raw;
          dims = raw_dims;
        }

        if (labeled) {
          emit(alg, k, "purity", purity(clusters, data.labels()));
          emit(alg, k, "ari", ari(clusters, data.labels()));
          emit(alg, k, "nmi", nmi(clusters, data.labels()));
        }
        emit(alg, k, "silhouette",
             k >= 2 ? silhouette(*points, data.size(), dims, clusters, cmd.common.threads)
                    : 0.0);
        UtilityResult util = utility(data, clusters, UtilityParams{}, run_seed);
        emit(alg, k, "utility", util.value);
      }
    }
    if (!out) throw Error(Errc::io_failure, "write to '" + cmd.out + "' failed");
    std::cerr << "kshap sweep: " << elapsed_seconds(start) << "s -> " << cmd.out << '\n';
    return 0;
  } catch (const Error& e) {
    if (e.code() == Errc::invalid_config) {
      std::cerr << "kshap sweep: " << e.what() << '\n';
      return 2;
    }
    std::cerr << "kshap sweep: stage " << stage << ": " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "kshap sweep: stage " << stage << ": " << e.what() << '\n';
    return 1;
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Entry
// ---------------------------------------------------------------------------

std::string version_string() {
  std::string s = std::string("kshap ") + kVersion + "\nschemas:";
  for (const auto& id : builtin_schema_ids()) s += " " + id;
  s += "\nbuilt with " +
#if defined(__VERSION__)
       std::string("gcc/clang ") + __VERSION__;
#else
       std::string("an unknown compiler");
#endif
  return s;
}

const std::vector<std::string>& deviations() {
  static const std::vector<std::string> list = {
      "em-baseline-uses-linear-ridge-policies",
      "utility-policy-family-is-a-small-random-forest",
      "price-ma-diff-features-use-a-logistic-squash",
      "shap-uses-interventional-background-semantics",
  };
  return list;
}

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"K-SHAP: policy clustering for anonymous state-action pairs"};
  app.set_version_flag("--version", version_string());
  app.require_subcommand(0, 1);

  SimulateCmd simulate_cmd;
  auto* simulate = app.add_subcommand("simulate", "Run the market simulator to a CSV");
  add_common(simulate, simulate_cmd.common);
  simulate->add_option("--scenario", simulate_cmd.scenario, "Built-in scenario (pi3-analog)");
  simulate->add_option("--horizon", simulate_cmd.horizon, "Override horizon seconds");
  simulate->add_option("--out", simulate_cmd.out, "Output CSV path")->required();

  PdGenCmd pd_cmd;
  auto* pd = app.add_subcommand("pd-gen", "Generate an iterated prisoner's dilemma CSV");
  add_common(pd, pd_cmd.common);
  pd->add_option("--scenario", pd_cmd.scenario,
                 "defect-vs-cooperate or cooperate-vs-flipper");
  pd->add_option("--rounds", pd_cmd.rounds, "Number of rounds");
  pd->add_option("--state-mode", pd_cmd.state_mode, "null or full");
  pd->add_option("--out", pd_cmd.out, "Output CSV path")->required();

  TrainCmd train_cmd;
  auto* train = app.add_subcommand("train", "Fit the world-policy forest");
  add_common(train, train_cmd.common);
  add_forest(train, train_cmd.forest);
  train->add_option("--data", train_cmd.data, "Input CSV")->required();
  train->add_option("--out", train_cmd.out, "Model JSON path")->required();
  train->add_flag("--oob", train_cmd.oob, "Compute out-of-bag MSE");

  ExplainCmd explain_cmd;
  auto* explain = app.add_subcommand("explain", "TreeSHAP explanations for a dataset");
  add_common(explain, explain_cmd.common);
  explain->add_option("--model", explain_cmd.model, "Model JSON path")->required();
  explain->add_option("--data", explain_cmd.data, "Input CSV")->required();
  explain->add_option("--background-size", explain_cmd.background_size,
                      "Background sample size");
  explain->add_option("--out", explain_cmd.out, "Output shap.csv path")->required();

  ClusterCmd cluster_cmd;
  auto* cluster = app.add_subcommand("cluster", "K-Means over a SHAP matrix");
  add_common(cluster, cluster_cmd.common);
  cluster->add_option("--shap", cluster_cmd.shap, "Input shap.csv")->required();
  cluster->add_option("--k", cluster_cmd.k_text, "Cluster count or 'auto'");
  cluster->add_option("--k-min", cluster_cmd.k_min, "Elbow range lower bound");
  cluster->add_option("--k-max", cluster_cmd.k_max, "Elbow range upper bound");
  cluster->add_option("--restarts", cluster_cmd.restarts, "K-Means restarts");
  cluster->add_option("--action-dim", cluster_cmd.action_dim,
                      "Cluster one action dimension only (-1 = all)");
  cluster->add_option("--out", cluster_cmd.out, "Output labels.csv")->required();
  cluster->add_option("--curve-out", cluster_cmd.curve_out,
                      "Write the elbow curve CSV here (k = auto only)");

  EvaluateCmd evaluate_cmd;
  auto* evaluate = app.add_subcommand("evaluate", "Clustering evaluation report");
  add_common(evaluate, evaluate_cmd.common);
  evaluate->add_option("--data", evaluate_cmd.data, "Input CSV")->required();
  evaluate->add_option("--labels", evaluate_cmd.labels, "labels.csv from cluster/pipeline")
      ->required();
  evaluate->add_option("--points", evaluate_cmd.points,
                       "Point matrix CSV (e.g. shap.csv) for the silhouette");
  evaluate->add_option("--report", evaluate_cmd.report, "Output report JSON")->required();
  evaluate->add_option("--algorithm", evaluate_cmd.algorithm, "Algorithm tag for the report");

  PipelineCmd pipeline_cmd;
  auto* pipeline = app.add_subcommand("pipeline", "Full K-SHAP run: train, explain, cluster");
  add_common(pipeline, pipeline_cmd.common);
  add_forest(pipeline, pipeline_cmd.forest);
  pipeline->add_option("--data", pipeline_cmd.data, "Input CSV")->required();
  pipeline->add_option("--k", pipeline_cmd.k_text, "Cluster count or 'auto'");
  pipeline->add_option("--k-min", pipeline_cmd.k_min, "Elbow range lower bound");
  pipeline->add_option("--k-max", pipeline_cmd.k_max, "Elbow range upper bound");
  pipeline->add_option("--restarts", pipeline_cmd.restarts, "K-Means restarts");
  pipeline->add_option("--action-dim", pipeline_cmd.action_dim,
                       "Cluster one action dimension only (-1 = all)");
  pipeline->add_option("--background-size", pipeline_cmd.background_size,
                       "Background sample size");
  pipeline->add_option("--out", pipeline_cmd.out, "Output labels.csv")->required();
  pipeline->add_option("--report", pipeline_cmd.report, "Output report JSON")->required();
  pipeline->add_option("--model", pipeline_cmd.model_out, "Also write the model JSON here");
  pipeline->add_option("--shap", pipeline_cmd.shap_out, "Also write the shap.csv here");
  pipeline->add_option("--elbow-out", pipeline_cmd.elbow_out,
                       "Elbow curve CSV path (default: derived from --report)");

  SweepCmd sweep_cmd;
  auto* sweep = app.add_subcommand("sweep", "Metric sweep over k and algorithms");
  add_common(sweep, sweep_cmd.common);
  add_forest(sweep, sweep_cmd.forest);
  sweep->add_option("--data", sweep_cmd.data, "Input CSV")->required();
  sweep->add_option("--k-min", sweep_cmd.k_min, "Lowest k");
  sweep->add_option("--k-max", sweep_cmd.k_max, "Highest k");
  sweep->add_option("--algorithms", sweep_cmd.algorithms,
                    "Subset of kshap,kmeans-raw,em")->delimiter(',');
  sweep->add_option("--restarts", sweep_cmd.restarts, "Restarts per clustering");
  sweep->add_option("--background-size", sweep_cmd.background_size,
                    "Background sample size (kshap)");
  sweep->add_option("--out", sweep_cmd.out, "Output long-format CSV")->required();

  // Pre-scan for --config so file values become option defaults that flags
  // still override.
  try {
    for (int i = 1; i + 1 < argc; ++i) {
      if (std::string(argv[i]) == "--config") {
        ConfigOverlay overlay;
        overlay.load(argv[i + 1]);
        for (CLI::App* cmd : {simulate, pd, train, explain, cluster, evaluate, pipeline, sweep}) {
          bool requested = false;
          for (int a = 1; a < argc; ++a)
            if (cmd->get_name() == argv[a]) requested = true;
          // The simulate config is the MarketConfig document, handled in the
          // command itself.
          if (requested && cmd != simulate) overlay.apply(cmd);
        }
        break;
      }
    }
  } catch (const Error& e) {
    std::cerr << "kshap: " << e.what() << '\n';
    return 2;
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  CommonOpts* common = nullptr;
  if (simulate->parsed()) common = &simulate_cmd.common;
  if (pd->parsed()) common = &pd_cmd.common;
  if (train->parsed()) common = &train_cmd.common;
  if (explain->parsed()) common = &explain_cmd.common;
  if (cluster->parsed()) common = &cluster_cmd.common;
  if (evaluate->parsed()) common = &evaluate_cmd.common;
  if (pipeline->parsed()) common = &pipeline_cmd.common;
  if (sweep->parsed()) common = &sweep_cmd.common;
  if (common && common->threads > 0) set_default_threads(common->threads);

  if (simulate->parsed()) return cmd_simulate(simulate_cmd);
  if (pd->parsed()) return cmd_pd_gen(pd_cmd);
  if (train->parsed()) return cmd_train(train_cmd);
  if (explain->parsed()) return cmd_explain(explain_cmd);
  if (cluster->parsed()) return cmd_cluster(cluster_cmd);
  if (evaluate->parsed()) return cmd_evaluate(evaluate_cmd);
  if (pipeline->parsed()) return cmd_pipeline(pipeline_cmd);
  if (sweep->parsed()) return cmd_sweep(sweep_cmd);

  std::cout << app.help() << '\n';
  return 0;
}

}  // namespace kshap
