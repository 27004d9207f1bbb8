#pragma once

#include <functional>
#include <thread>
#include <vector>

#include "lamo/tensor.hpp"

namespace lamo {

/// Static contiguous split of [0, n) across `threads` workers. Each item is
/// processed by exactly one worker with a partition that depends only on
/// (n, threads), so any write pattern over disjoint items is deterministic.
template <class F>
void parallel_for(Index n, int threads, F&& body) {
  if (threads <= 1 || n <= 1) {
    for (Index i = 0; i < n; ++i) body(i);
    return;
  }
  const int workers = static_cast<int>(std::min<Index>(threads, n));
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(workers));
  const Index chunk = (n + workers - 1) / workers;
  for (int t = 0; t < workers; ++t) {
    const Index lo = t * chunk;
    const Index hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([lo, hi, &body] {
      for (Index i = lo; i < hi; ++i) body(i);
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace lamo
