#include "kshap/common.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace kshap {

const char* errc_name(Errc code) {
  switch (code) {
    case Errc::missing_column: return "MissingColumn";
    case Errc::non_finite_value: return "NonFiniteValue";
    case Errc::type_mismatch: return "TypeMismatch";
    case Errc::io_failure: return "IoFailure";
    case Errc::empty_dataset: return "EmptyDataset";
    case Errc::degenerate_market: return "DegenerateMarket";
    case Errc::insufficient_history: return "InsufficientHistory";
    case Errc::dimension_mismatch: return "DimensionMismatch";
    case Errc::too_many_features: return "TooManyFeatures";
    case Errc::empty_background: return "EmptyBackground";
    case Errc::schema_mismatch: return "SchemaMismatch";
    case Errc::too_few_points: return "TooFewPoints";
    case Errc::range_too_small: return "RangeTooSmall";
    case Errc::length_mismatch: return "LengthMismatch";
    case Errc::single_cluster: return "SingleCluster";
    case Errc::invalid_config: return "InvalidConfig";
  }
  return "Error";
}

namespace {

int g_threads = 0;  // 0 = resolve from env / hardware

int resolve_threads() {
  if (g_threads > 0) return g_threads;
  if (const char* env = std::getenv("KSHAP_THREADS")) {
    int n = std::atoi(env);
    if (n > 0) return n;
  }
  unsigned hw = std::thread::hardware_concurrency();
  return hw > 0 ? static_cast<int>(hw) : 1;
}

}  // namespace

int default_threads() { return resolve_threads(); }

void set_default_threads(int n) { g_threads = n; }

void parallel_for(std::size_t n, int n_threads,
                  const std::function<void(std::size_t)>& fn) {
  if (n_threads <= 0) n_threads = default_threads();
  if (n_threads == 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::size_t workers = std::min<std::size_t>(n_threads, n);
  std::size_t chunk = std::max<std::size_t>(1, n / (workers * 8));
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  pool.reserve(workers);
  std::atomic<bool> failed{false};
  std::exception_ptr first_error;
  std::mutex err_mutex;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (;;) {
        std::size_t lo = next.fetch_add(chunk);
        if (lo >= n || failed.load(std::memory_order_relaxed)) break;
        std::size_t hi = std::min(n, lo + chunk);
        try {
          for (std::size_t i = lo; i < hi; ++i) fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(err_mutex);
          if (!first_error) first_error = std::current_exception();
          failed = true;
          break;
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace kshap
