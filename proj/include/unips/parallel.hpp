#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace unips {

/// Worker count: UNIPS_THREADS if set, else 1.
inline int& worker_threads() {
  static int n = [] {
    if (const char* s = std::getenv("UNIPS_THREADS")) {
      const int v = std::atoi(s);
      if (v > 0) return v;
    }
    return 1;
  }();
  return n;
}

/// Runs body(i) for i in [begin, end) over a static contiguous partition.
/// Bodies must write disjoint outputs; results are then independent of the
/// thread count.
template <class F>
void parallel_for(std::int64_t begin, std::int64_t end, F&& body) {
  const std::int64_t n = end - begin;
  const int threads = static_cast<int>(std::min<std::int64_t>(worker_threads(), std::max<std::int64_t>(n, 1)));
  if (threads <= 1) {
    for (std::int64_t i = begin; i < end; ++i) body(i);
    return;
  }
  std::vector<std::thread> pool;
  std::exception_ptr err;
  std::mutex err_mu;
  for (int t = 0; t < threads; ++t) {
    const std::int64_t lo = begin + n * t / threads, hi = begin + n * (t + 1) / threads;
    pool.emplace_back([&, lo, hi] {
      try {
        for (std::int64_t i = lo; i < hi; ++i) body(i);
      } catch (...) {
        std::lock_guard lk(err_mu);
        if (!err) err = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  if (err) std::rethrow_exception(err);
}

}  // namespace unips
