#pragma once

#include <algorithm>
#include <cstddef>
#include <exception>
#include <thread>
#include <vector>

namespace volsynth {

namespace detail {
inline std::size_t& thread_count_ref() {
  static std::size_t n = 1;
  return n;
}
}  // namespace detail

inline void set_num_threads(std::size_t n) { detail::thread_count_ref() = std::max<std::size_t>(1, n); }
inline std::size_t num_threads() { return detail::thread_count_ref(); }

/// Runs body(i) for i in [0, n). Work items must write disjoint memory; the
/// split depends only on n and the thread count so results are reproducible.
template <class Body>
void parallel_for(std::size_t n, Body&& body) {
  const std::size_t workers = std::min(num_threads(), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) body(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace volsynth
