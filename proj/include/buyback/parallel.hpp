#pragma once

#include <algorithm>
#include <cstdlib>
#include <exception>
#include <string>
#include <thread>
#include <vector>

namespace buyback {

/// Worker count from BUYBACK_THREADS (default 1).
inline unsigned thread_count_from_env() {
  if (const char* s = std::getenv("BUYBACK_THREADS")) {
    const long n = std::strtol(s, nullptr, 10);
    if (n > 0) return static_cast<unsigned>(n);
  }
  return 1;
}

/// Runs fn(k) for k in [0, tasks) on up to `threads` workers. Tasks are
/// statically partitioned so results written per task are reduced by the
/// caller in task order, independent of the thread count.
template <class F>
void parallel_for(std::size_t tasks, unsigned threads, F&& fn) {
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(tasks)));
  if (threads <= 1) {
    for (std::size_t k = 0; k < tasks; ++k) fn(k);
    return;
  }
  std::vector<std::exception_ptr> errors(threads);
  std::vector<std::thread> pool;
  for (unsigned w = 0; w < threads; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t k = w; k < tasks; k += threads) fn(k);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace buyback
