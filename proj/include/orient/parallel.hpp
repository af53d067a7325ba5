#pragma once

#include <algorithm>
#include <functional>
#include <thread>
#include <vector>

namespace orient {

/// 0 means "use all hardware threads".
inline int resolve_threads(int requested) {
  if (requested > 0) return requested;
  unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

/// Runs f(i) for i in [0, n) on `threads` workers with static contiguous
/// partitioning. Worker w handles one fixed chunk, so the assignment of items
/// to workers depends only on (n, threads); callers that reduce per-worker
/// buffers in worker order get results that are deterministic for a fixed
/// thread count.
template <typename F>
void parallel_for(int n, int threads, F&& f) {
  threads = std::min(std::max(threads, 1), std::max(n, 1));
  if (n <= 0) return;
  if (threads == 1) {
    for (int i = 0; i < n; ++i) f(i, 0);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(threads - 1));
  int chunk = (n + threads - 1) / threads;
  for (int w = 1; w < threads; ++w) {
    int begin = w * chunk;
    int end = std::min(n, begin + chunk);
    if (begin >= end) break;
    pool.emplace_back([&f, begin, end, w] {
      for (int i = begin; i < end; ++i) f(i, w);
    });
  }
  for (int i = 0; i < std::min(chunk, n); ++i) f(i, 0);
  for (auto& t : pool) t.join();
}

}  // namespace orient
