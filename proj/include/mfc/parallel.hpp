#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace mfc {

namespace detail {
inline std::atomic<int> g_workers{1};
}

/// Number of worker threads used by parallel_chunks.  Set once at startup
/// (CLI --workers); defaults to 1 so library users get serial execution
/// unless they opt in.
inline int worker_count() { return detail::g_workers.load(std::memory_order_relaxed); }
inline void set_worker_count(int workers) {
  detail::g_workers.store(workers < 1 ? 1 : workers, std::memory_order_relaxed);
}

/// Deterministic pairwise sum of a contiguous range.  The reduction tree is a
/// function of the length only, so the result is bitwise independent of how
/// the values were produced.
inline double pairwise_sum(const double* v, std::size_t count) {
  if (count <= 8) {
    double s = 0.0;
    for (std::size_t i = 0; i < count; ++i) s += v[i];
    return s;
  }
  const std::size_t half = count / 2;
  return pairwise_sum(v, half) + pairwise_sum(v + half, count - half);
}

inline double pairwise_sum(const std::vector<double>& v) {
  return pairwise_sum(v.data(), v.size());
}

/// Splits [0, total) into fixed-size chunks (the grid depends only on `total`
/// and `grain`, never on the worker count) and runs `body(chunk, begin, end)`
/// over them.  With one worker the loop runs inline.  Any numeric output must
/// be written to per-chunk slots; combine slots afterwards with pairwise_sum
/// so results are bitwise identical for every worker count.
template <typename Body>
void parallel_chunks(std::size_t total, std::size_t grain, Body&& body) {
  if (total == 0) return;
  if (grain == 0) grain = 1;
  const std::size_t nchunks = (total + grain - 1) / grain;
  const int workers = worker_count();
  if (workers <= 1 || nchunks == 1) {
    for (std::size_t c = 0; c < nchunks; ++c) {
      const std::size_t b = c * grain;
      body(c, b, std::min(b + grain, total));
    }
    return;
  }
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::exception_ptr first_error;
  std::mutex error_mutex;
  auto run = [&] {
    for (;;) {
      const std::size_t c = next.fetch_add(1, std::memory_order_relaxed);
      if (c >= nchunks || failed.load(std::memory_order_relaxed)) return;
      try {
        const std::size_t b = c * grain;
        body(c, b, std::min(b + grain, total));
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!failed.exchange(true)) first_error = std::current_exception();
        return;
      }
    }
  };
  std::vector<std::thread> pool;
  const int spawn =
      static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(workers), nchunks)) - 1;
  pool.reserve(static_cast<std::size_t>(spawn));
  for (int w = 0; w < spawn; ++w) pool.emplace_back(run);
  run();
  for (auto& t : pool) t.join();
  if (failed) std::rethrow_exception(first_error);
}

/// Chunked reduction: `body(chunk, begin, end)` returns the chunk's partial
/// sum (accumulated serially, in index order, inside the chunk); partials are
/// combined pairwise.  Deterministic for every worker count.
template <typename Body>
double parallel_reduce(std::size_t total, std::size_t grain, Body&& body) {
  if (total == 0) return 0.0;
  if (grain == 0) grain = 1;
  const std::size_t nchunks = (total + grain - 1) / grain;
  std::vector<double> partial(nchunks, 0.0);
  parallel_chunks(total, grain, [&](std::size_t c, std::size_t b, std::size_t e) {
    partial[c] = body(c, b, e);
  });
  return pairwise_sum(partial);
}

/// Default chunk grain for per-particle loops: large enough to amortize
/// dispatch, small enough to balance four workers on mid-size levels.
inline constexpr std::size_t kDefaultGrain = 16384;

}  // namespace mfc
