#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace shlab {

/// Number of workers used by ensemble loops. 0 means hardware concurrency.
inline std::size_t& worker_count() {
  static std::size_t n = 1;
  return n;
}

inline void set_worker_count(std::size_t n) {
  worker_count() = n == 0 ? std::max<std::size_t>(1, std::thread::hardware_concurrency()) : n;
}

/// Runs body(i) for i in [0, n). Each index is written by exactly one worker,
/// so callers that store results by index get schedule-independent output.
template <class F>
void parallel_for(std::size_t n, F&& body) {
  const std::size_t workers = std::min(worker_count(), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr err;
  std::mutex err_mutex;
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          body(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(err_mutex);
          if (!err) err = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  if (err) std::rethrow_exception(err);
}

}  // namespace shlab
