#pragma once

#include <cstddef>
#include <functional>

namespace maskfuse {

// Worker count from MASKFUSE_THREADS (default 1, clamped to >= 1).
unsigned worker_threads();

// Runs body(i) for i in [0, n). Work is split into contiguous chunks, so
// results written by index are independent of the thread count. The first
// exception thrown by any worker is rethrown.
void parallel_for(std::size_t n, const std::function<void(std::size_t)> & body);

} // namespace maskfuse
