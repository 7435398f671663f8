#pragma once

#include <algorithm>
#include <cstddef>
#include <exception>
#include <thread>
#include <vector>

namespace critsmooth {

/// Runs f(i, worker) for i in [0, n) on contiguous blocks. Every index is
/// handled exactly once, so results written per index do not depend on the
/// worker count. The first exception thrown by any worker is rethrown.
template <class F>
void parallel_for(std::size_t n, int workers, F&& f) {
  const std::size_t w = std::clamp<std::size_t>(workers < 1 ? 1 : static_cast<std::size_t>(workers), 1, std::max<std::size_t>(n, 1));
  if (w == 1) {
    for (std::size_t i = 0; i < n; ++i) f(i, 0);
    return;
  }
  std::vector<std::exception_ptr> errors(w);
  std::vector<std::thread> pool;
  pool.reserve(w);
  for (std::size_t k = 0; k < w; ++k) {
    pool.emplace_back([&, k] {
      const std::size_t lo = n * k / w, hi = n * (k + 1) / w;
      try {
        for (std::size_t i = lo; i < hi; ++i) f(i, static_cast<int>(k));
      } catch (...) {
        errors[k] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace critsmooth
