#include "kshap/clustering.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <Eigen/Dense>

namespace kshap {

namespace {

constexpr std::uint64_t kRestartStream = 0x4E57;
constexpr std::uint64_t kForestFork = 1;
constexpr std::uint64_t kBackgroundFork = 2;
constexpr std::uint64_t kKMeansFork = 3;
constexpr std::uint64_t kElbowFork = 4;

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;

}  // namespace

// ---------------------------------------------------------------------------
// K-Means
// ---------------------------------------------------------------------------

namespace {

struct LloydState {
  std::vector<double> centroids;  // k x dims
  std::vector<int> assignments;
  double inertia = 0.0;
  int iterations = 0;
};

// Assigns every point to its nearest centroid (ties to the lowest index) and
// returns the within-cluster sum of squares. Parallel over points.
double assign_points(ConstMap points, const std::vector<double>& centroids,
                     std::size_t k, std::vector<int>& assignments, int n_threads) {
  const std::size_t rows = points.rows();
  const std::size_t dims = points.cols();
  ConstMap c(centroids.data(), k, dims);
  std::vector<double> c_sq(k);
  for (std::size_t j = 0; j < k; ++j) c_sq[j] = c.row(j).squaredNorm();

  std::vector<double> dist(rows);
  parallel_for(rows, n_threads, [&](std::size_t i) {
    double best = std::numeric_limits<double>::infinity();
    int best_j = 0;
    for (std::size_t j = 0; j < k; ++j) {
      double d = c_sq[j] - 2.0 * points.row(i).dot(c.row(j));
      if (d < best) {
        best = d;
        best_j = static_cast<int>(j);
      }
    }
    assignments[i] = best_j;
    dist[i] = std::max(0.0, best + points.row(i).squaredNorm());
  });
  double inertia = 0.0;
  for (double d : dist) inertia += d;
  return inertia;
}

void update_centroids(ConstMap points, const std::vector<int>& assignments,
                      std::size_t k, std::vector<double>& centroids) {
  const std::size_t dims = points.cols();
  std::fill(centroids.begin(), centroids.end(), 0.0);
  std::vector<std::size_t> counts(k, 0);
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    int j = assignments[i];
    ++counts[j];
    for (std::size_t d = 0; d < dims; ++d) centroids[j * dims + d] += points(i, d);
  }
  for (std::size_t j = 0; j < k; ++j)
    if (counts[j] > 0)
      for (std::size_t d = 0; d < dims; ++d)
        centroids[j * dims + d] /= static_cast<double>(counts[j]);
}

std::vector<double> kmeanspp_init(ConstMap points, std::size_t k, Rng& rng) {
  const std::size_t rows = points.rows();
  const std::size_t dims = points.cols();
  std::vector<double> centroids(k * dims);
  std::size_t first = rng.uniform_int(rows);
  for (std::size_t d = 0; d < dims; ++d) centroids[d] = points(first, d);

  std::vector<double> d2(rows);
  for (std::size_t i = 0; i < rows; ++i)
    d2[i] = (points.row(i) - ConstMap(centroids.data(), 1, dims).row(0)).squaredNorm();

  for (std::size_t j = 1; j < k; ++j) {
    double total = std::accumulate(d2.begin(), d2.end(), 0.0);
    std::size_t pick;
    if (total <= 0.0) {
      pick = rng.uniform_int(rows);
    } else {
      double r = rng.uniform() * total;
      double cum = 0.0;
      pick = rows - 1;
      for (std::size_t i = 0; i < rows; ++i) {
        cum += d2[i];
        if (cum > r) {
          pick = i;
          break;
        }
      }
    }
    for (std::size_t d = 0; d < dims; ++d) centroids[j * dims + d] = points(pick, d);
    Eigen::Map<const Eigen::RowVectorXd> c(centroids.data() + j * dims, dims);
    for (std::size_t i = 0; i < rows; ++i)
      d2[i] = std::min(d2[i], (points.row(i) - c).squaredNorm());
  }
  return centroids;
}

// Moves the globally farthest point into each empty cluster.
void repair_empty_clusters(ConstMap points, std::size_t k, std::vector<int>& assignments,
                           std::vector<double>& centroids) {
  const std::size_t dims = points.cols();
  std::vector<std::size_t> counts(k, 0);
  for (int a : assignments) ++counts[a];
  for (std::size_t j = 0; j < k; ++j) {
    if (counts[j] > 0) continue;
    double far_dist = -1.0;
    std::size_t far_idx = 0;
    for (Eigen::Index i = 0; i < points.rows(); ++i) {
      std::size_t cur = assignments[i];
      if (counts[cur] <= 1) continue;  // do not empty a donor
      Eigen::Map<const Eigen::RowVectorXd> c(centroids.data() + cur * dims, dims);
      double d = (points.row(i) - c).squaredNorm();
      if (d > far_dist) {
        far_dist = d;
        far_idx = i;
      }
    }
    --counts[assignments[far_idx]];
    assignments[far_idx] = static_cast<int>(j);
    ++counts[j];
    for (std::size_t d = 0; d < dims; ++d)
      centroids[j * dims + d] = points(far_idx, d);
  }
}

LloydState lloyd_run(ConstMap points, std::size_t k, Rng& rng, int max_iterations,
                     int n_threads) {
  const std::size_t rows = points.rows();
  LloydState state;
  state.centroids = kmeanspp_init(points, k, rng);
  state.assignments.assign(rows, -1);
  std::vector<int> prev;
  double prev_inertia = std::numeric_limits<double>::infinity();
  for (int iter = 0; iter < max_iterations; ++iter) {
    prev = state.assignments;
    state.inertia = assign_points(points, state.centroids, k, state.assignments, n_threads);
    if (state.inertia > prev_inertia * (1.0 + 1e-9) + 1e-12)
      throw std::logic_error("Lloyd iteration increased inertia");
    prev_inertia = state.inertia;
    repair_empty_clusters(points, k, state.assignments, state.centroids);
    state.iterations = iter + 1;
    if (state.assignments == prev) break;
    update_centroids(points, state.assignments, k, state.centroids);
  }
  return state;
}

}  // namespace

KMeansModel kmeans_fit(const std::vector<double>& points, std::size_t rows,
                       std::size_t dims, std::size_t k, std::uint64_t seed,
                       int restarts, int max_iterations, int n_threads) {
  if (k < 1 || rows < k)
    throw Error(Errc::too_few_points, "need at least k = " + std::to_string(k) +
                                          " points, got " + std::to_string(rows));
  if (points.size() != rows * dims)
    throw Error(Errc::dimension_mismatch, "points buffer does not match rows x dims");
  ConstMap map(points.data(), rows, dims);

  KMeansModel best;
  best.inertia = std::numeric_limits<double>::infinity();
  for (int r = 0; r < std::max(1, restarts); ++r) {
    Rng rng(mix64(seed, kRestartStream, static_cast<std::uint64_t>(r)));
    LloydState state = lloyd_run(map, k, rng, max_iterations, n_threads);
    if (state.inertia < best.inertia) {
      best.k = k;
      best.dims = dims;
      best.centroids = std::move(state.centroids);
      best.assignments = std::move(state.assignments);
      best.inertia = state.inertia;
      best.iterations_run = state.iterations;
      best.seed = seed;
    }
  }
  return best;
}

double kmeans_inertia(const KMeansModel& model, const std::vector<double>& points,
                      std::size_t rows) {
  ConstMap map(points.data(), rows, model.dims);
  double total = 0.0;
  for (std::size_t i = 0; i < rows; ++i) {
    Eigen::Map<const Eigen::RowVectorXd> c(
        model.centroids.data() + model.assignments[i] * model.dims, model.dims);
    total += (map.row(i) - c).squaredNorm();
  }
  return total;
}

double kmeans_distortion(const KMeansModel& model, const std::vector<double>& points,
                         std::size_t rows) {
  ConstMap map(points.data(), rows, model.dims);
  double total = 0.0;
  for (std::size_t i = 0; i < rows; ++i) {
    Eigen::Map<const Eigen::RowVectorXd> c(
        model.centroids.data() + model.assignments[i] * model.dims, model.dims);
    total += (map.row(i) - c).norm();
  }
  return total / static_cast<double>(rows);
}

// ---------------------------------------------------------------------------
// Elbow method
// ---------------------------------------------------------------------------

ElbowReport elbow_from_curve(const std::vector<int>& ks,
                             const std::vector<double>& distortions) {
  if (ks.size() != distortions.size() || ks.size() < 3)
    throw Error(Errc::range_too_small, "elbow needs at least 3 candidate ks");
  ElbowReport report;
  report.ks = ks;
  report.distortions = distortions;

  double best_sd = -std::numeric_limits<double>::infinity();
  double second_sd = -std::numeric_limits<double>::infinity();
  std::size_t best_i = 1;
  for (std::size_t i = 1; i + 1 < ks.size(); ++i) {
    double sd = distortions[i - 1] - 2.0 * distortions[i] + distortions[i + 1];
    if (sd > best_sd) {
      second_sd = best_sd;
      best_sd = sd;
      best_i = i;
    } else if (sd > second_sd) {
      second_sd = sd;
    }
  }
  report.chosen_k = ks[best_i];
  if (ks.size() == 3 || !(second_sd > 0.0)) {
    report.knee_ratio = best_sd > 0.0 ? std::numeric_limits<double>::infinity() : 0.0;
  } else {
    report.knee_ratio = best_sd / second_sd;
  }
  report.low_confidence = !(report.knee_ratio >= 2.0);
  return report;
}

ElbowReport elbow_select_k(const std::vector<double>& points, std::size_t rows,
                           std::size_t dims, int k_min, int k_max, std::uint64_t seed,
                           int restarts, int n_threads) {
  if (k_min < 1 || static_cast<std::size_t>(k_max) > rows || k_max - k_min < 2)
    throw Error(Errc::range_too_small,
                "need k_min >= 1, k_max <= T and k_max - k_min >= 2");
  std::vector<int> ks;
  std::vector<double> distortions, inertias;
  for (int k = k_min; k <= k_max; ++k) {
    KMeansModel m = kmeans_fit(points, rows, dims, k, mix64(seed, kElbowFork, k),
                               restarts, 300, n_threads);
    ks.push_back(k);
    distortions.push_back(kmeans_distortion(m, points, rows));
    inertias.push_back(m.inertia);
  }
  ElbowReport report = elbow_from_curve(ks, distortions);
  report.inertias = inertias;
  return report;
}

// ---------------------------------------------------------------------------
// EM K-Clustering
// ---------------------------------------------------------------------------

namespace {

struct EmRun {
  std::vector<double> coefficients;
  std::vector<int> assignments;
  double total_residual = std::numeric_limits<double>::infinity();
  int iterations = 0;
  bool collapsed = false;
};

// Ridge solve per cluster; X carries the intercept column.
void em_m_step(const RowMatrix& x, const RowMatrix& y, const std::vector<int>& assignments,
               std::size_t k, std::vector<double>& coefficients) {
  const std::size_t p = x.cols();
  const std::size_t d = y.cols();
  constexpr double kRidge = 1e-6;
  for (std::size_t j = 0; j < k; ++j) {
    std::vector<Eigen::Index> members;
    for (Eigen::Index i = 0; i < x.rows(); ++i)
      if (assignments[i] == static_cast<int>(j)) members.push_back(i);
    RowMatrix xj(members.size(), p), yj(members.size(), d);
    for (std::size_t m = 0; m < members.size(); ++m) {
      xj.row(m) = x.row(members[m]);
      yj.row(m) = y.row(members[m]);
    }
    Eigen::MatrixXd gram = xj.transpose() * xj;
    gram.diagonal().array() += kRidge;
    Eigen::MatrixXd w = gram.ldlt().solve(xj.transpose() * yj);  // p x d
    for (std::size_t r = 0; r < p; ++r)
      for (std::size_t c = 0; c < d; ++c)
        coefficients[(j * p + r) * d + c] = w(r, c);
  }
}

double em_e_step(const RowMatrix& x, const RowMatrix& y, std::size_t k,
                 const std::vector<double>& coefficients, std::vector<int>& assignments) {
  const std::size_t p = x.cols();
  const std::size_t d = y.cols();
  double total = 0.0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    int best_j = 0;
    for (std::size_t j = 0; j < k; ++j) {
      Eigen::Map<const RowMatrix> w(coefficients.data() + j * p * d, p, d);
      double res = (x.row(i) * w - y.row(i)).squaredNorm();
      if (res < best) {
        best = res;
        best_j = static_cast<int>(j);
      }
    }
    assignments[i] = best_j;
    total += best;
  }
  return total;
}

}  // namespace

EMKClusteringModel em_k_clustering(const Dataset& dataset, std::size_t k,
                                   std::uint64_t seed, int restarts,
                                   int max_iterations) {
  const std::size_t n = dataset.size();
  const std::size_t f = dataset.n_features();
  const std::size_t d = dataset.n_actions();
  if (k < 1 || n < k * (f + 1))
    throw Error(Errc::too_few_points,
                "EM K-Clustering needs T >= k * (F + 1) for identifiable policies");

  FeatureScaler scaler = fit_scaler(dataset);
  RowMatrix x(n, f + 1), y(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    auto s = dataset.state_row(i);
    for (std::size_t j = 0; j < f; ++j) x(i, j) = scaler.transform(j, s[j]);
    x(i, f) = 1.0;
    auto a = dataset.action_row(i);
    for (std::size_t j = 0; j < d; ++j) y(i, j) = a[j];
  }

  const std::size_t p = f + 1;
  EmRun best;
  int restarts_used = 0;
  for (int r = 0; r < std::max(1, restarts); ++r) {
    Rng rng(mix64(seed, kRestartStream, static_cast<std::uint64_t>(r)));
    EmRun run;
    run.coefficients.assign(k * p * d, 0.0);
    run.assignments.assign(n, 0);

    // Random init; reseed on cluster collapse, bounded.
    bool seeded = false;
    for (int attempt = 0; attempt < 20 && !seeded; ++attempt) {
      for (std::size_t i = 0; i < n; ++i)
        run.assignments[i] = static_cast<int>(rng.uniform_int(k));
      std::vector<std::size_t> counts(k, 0);
      for (int a : run.assignments) ++counts[a];
      seeded = std::all_of(counts.begin(), counts.end(),
                           [&](std::size_t c) { return c >= 1; });
      if (!seeded) continue;

      double prev_residual = std::numeric_limits<double>::infinity();
      std::vector<int> prev;
      run.collapsed = false;
      for (int iter = 0; iter < max_iterations; ++iter) {
        em_m_step(x, y, run.assignments, k, run.coefficients);
        prev = run.assignments;
        run.total_residual = em_e_step(x, y, k, run.coefficients, run.assignments);
        if (run.total_residual > prev_residual * (1.0 + 1e-7) + 1e-9)
          throw std::logic_error("EM iteration increased the total residual");
        prev_residual = run.total_residual;
        run.iterations = iter + 1;
        std::vector<std::size_t> sizes(k, 0);
        for (int a : run.assignments) ++sizes[a];
        if (std::any_of(sizes.begin(), sizes.end(),
                        [](std::size_t c) { return c == 0; })) {
          run.collapsed = true;
          break;
        }
        if (run.assignments == prev) break;
      }
      if (run.collapsed) seeded = false;  // reseed this restart
    }
    ++restarts_used;
    if (seeded && run.total_residual < best.total_residual) best = std::move(run);
  }
  if (!std::isfinite(best.total_residual))
    throw Error(Errc::too_few_points, "EM K-Clustering could not keep " +
                                          std::to_string(k) + " nonempty clusters");

  EMKClusteringModel model;
  model.k = k;
  model.n_features = f;
  model.n_outputs = d;
  model.coefficients = std::move(best.coefficients);
  model.assignments = std::move(best.assignments);
  model.total_residual = best.total_residual;
  model.iterations_run = best.iterations;
  model.restarts_used = restarts_used;
  model.scaler = std::move(scaler);
  return model;
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

std::vector<double> state_action_matrix(const Dataset& dataset, bool standardize) {
  const std::size_t n = dataset.size();
  const std::size_t f = dataset.n_features();
  const std::size_t d = dataset.n_actions();
  std::vector<double> out(n * (f + d));
  for (std::size_t i = 0; i < n; ++i) {
    auto s = dataset.state_row(i);
    auto a = dataset.action_row(i);
    double* row = out.data() + i * (f + d);
    std::copy(s.begin(), s.end(), row);
    std::copy(a.begin(), a.end(), row + f);
  }
  if (standardize && n >= 2) {
    FeatureScaler scaler = fit_scaler_matrix(out, n, f + d);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < f + d; ++j)
        out[i * (f + d) + j] = scaler.transform(j, out[i * (f + d) + j]);
  }
  return out;
}

PipelineResult kshap_pipeline(const Dataset& dataset, const PipelineOptions& options) {
  if (dataset.size() == 0) throw Error(Errc::empty_dataset, "pipeline input is empty");
  // Ground truth never reaches a pipeline stage.
  Dataset anonymous = dataset.without_metadata();

  PipelineResult result;
  ForestParams forest_params = options.forest;
  forest_params.seed = mix64(options.seed, kForestFork);
  result.forest = RandomForest::fit(anonymous, forest_params);

  result.background = make_background(anonymous, options.background_size,
                                      mix64(options.seed, kBackgroundFork));
  result.shap = explain_dataset(result.forest, anonymous, result.background,
                                options.n_threads);

  const std::vector<double>* points = &result.shap.values;
  std::vector<double> sliced;
  std::size_t dims = result.shap.dims();
  if (options.action_dim >= 0) {
    if (static_cast<std::size_t>(options.action_dim) >= result.shap.n_outputs)
      throw Error(Errc::dimension_mismatch, "action_dim out of range");
    sliced = result.shap.action_dim_slice(options.action_dim);
    points = &sliced;
    dims = result.shap.n_features;
  }

  int k = options.k;
  if (k <= 0) {
    result.elbow = elbow_select_k(*points, result.shap.rows, dims, options.elbow_k_min,
                                  options.elbow_k_max, mix64(options.seed, kElbowFork),
                                  options.restarts, options.n_threads);
    k = result.elbow->chosen_k;
  }
  result.kmeans = kmeans_fit(*points, result.shap.rows, dims, k,
                             mix64(options.seed, kKMeansFork), options.restarts, 300,
                             options.n_threads);
  result.labels = result.kmeans.assignments;
  return result;
}

}  // namespace kshap
