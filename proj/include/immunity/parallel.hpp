#pragma once

#include <cstddef>
#include <functional>

namespace immunity {

/// Worker cap: IMMUNITY_THREADS when set to a positive integer, else the core count.
std::size_t worker_count();

/// Runs fn(0..n-1) on up to worker_count() threads. Tasks must be independent;
/// the first exception thrown by any task is rethrown after all workers stop.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace immunity
