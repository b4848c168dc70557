#pragma once

#include <algorithm>
#include <cstdint>
#include <thread>
#include <vector>

namespace cec {

// Global worker count for the element-parallel loops inside the tensor
// primitives. Results are bitwise identical for any thread count: every
// parallel region partitions its output range into disjoint slices and each
// slice is computed with a fixed sequential reduction order.
int num_threads();
void set_num_threads(int n);

namespace detail {
inline int& thread_count_ref() {
  static int n = 1;
  return n;
}
}  // namespace detail

inline int num_threads() { return detail::thread_count_ref(); }

inline void set_num_threads(int n) {
  detail::thread_count_ref() = std::max(1, n);
}

inline int hardware_threads() {
  unsigned n = std::thread::hardware_concurrency();
  return n == 0 ? 1 : static_cast<int>(n);
}

// Runs f(i) for i in [begin, end). Slices are contiguous so each worker owns
// a disjoint index range.
template <typename F>
void parallel_for(std::int64_t begin, std::int64_t end, F&& f) {
  const std::int64_t count = end - begin;
  if (count <= 0) return;
  const int workers = static_cast<int>(
      std::min<std::int64_t>(num_threads(), count));
  if (workers <= 1) {
    for (std::int64_t i = begin; i < end; ++i) f(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers);
  const std::int64_t chunk = (count + workers - 1) / workers;
  for (int t = 0; t < workers; ++t) {
    const std::int64_t lo = begin + t * chunk;
    const std::int64_t hi = std::min(end, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([lo, hi, &f] {
      for (std::int64_t i = lo; i < hi; ++i) f(i);
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace cec
