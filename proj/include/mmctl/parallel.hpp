#pragma once

#include <cstddef>
#include <functional>

namespace mmctl {

// Worker count: MMCTL_THREADS if set (>= 1), else hardware concurrency.
std::size_t thread_budget();

// Runs f(i) for i in [0, n) on up to thread_budget() threads. Results must be
// written to per-index slots; the first exception thrown is rethrown.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& f);

}  // namespace mmctl
