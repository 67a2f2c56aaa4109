#pragma once

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace nsr {

/// --threads fallback: NSR_THREADS, else hardware concurrency.
inline std::size_t default_threads() {
  if (const char* env = std::getenv("NSR_THREADS")) {
    try {
      const long v = std::stol(env);
      if (v > 0) return static_cast<std::size_t>(v);
    } catch (...) {
    }
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

/**
 * Runs task(i) for i in [0, n) on up to `threads` workers. Tasks must write
 * disjoint outputs; the first exception is rethrown after all workers join.
 */
template <typename F>
void parallel_for(std::size_t n, std::size_t threads, F&& task) {
  threads = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(n, 1));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) task(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mu;
  std::vector<std::thread> pool;
  pool.reserve(threads);
  for (std::size_t t = 0; t < threads; ++t)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          task(i);
        } catch (...) {
          std::lock_guard lock(error_mu);
          if (!error) error = std::current_exception();
          next = n;
        }
      }
    });
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace nsr
