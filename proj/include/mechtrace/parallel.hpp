#pragma once

#include <atomic>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace mechtrace {

// Runs fn(i) for i in [0, n) on `workers` threads. Work items are claimed
// from a shared counter; callers that need deterministic output store
// results into slot i and fold them in index order afterwards, which makes
// every worker count produce identical bytes.
inline void parallel_for(int64_t n, int workers, const std::function<void(int64_t)>& fn) {
  if (workers < 1) workers = 1;
  if (n <= 0) return;
  if (workers == 1 || n == 1) {
    for (int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  workers = static_cast<int>(std::min<int64_t>(workers, n));
  std::atomic<int64_t> next{0};
  std::mutex err_mu;
  std::exception_ptr first_error;
  std::vector<std::thread> pool;
  pool.reserve(static_cast<size_t>(workers));
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (;;) {
        const int64_t i = next.fetch_add(1, std::memory_order_relaxed);
        if (i >= n) return;
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(err_mu);
          if (!first_error) first_error = std::current_exception();
          next.store(n, std::memory_order_relaxed);  // drain remaining work
          return;
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

inline int default_workers() {
  const unsigned hw = std::thread::hardware_concurrency();
  return hw ? static_cast<int>(hw) : 1;
}

}  // namespace mechtrace
