#pragma once

#include <cstddef>
#include <functional>

namespace codream {

// Worker bound from CODREAM_THREADS (falls back to hardware concurrency).
std::size_t worker_limit();

// Runs fn(i) for i in [0, count) on at most worker_limit() threads.
// Each index must touch disjoint state. The first exception is rethrown.
void parallel_for(std::size_t count, const std::function<void(std::size_t)>& fn);

}  // namespace codream
