#pragma once

#include <cstdint>
#include <functional>

namespace bandprobe {

// Worker cap for all internal parallelism. Initialized from the
// BANDPROBE_THREADS environment variable, falling back to the hardware
// concurrency. Always >= 1.
int max_threads();
void set_max_threads(int n);

// Runs body(begin, end) over a fixed contiguous partition of [0, n).
// The partition depends only on n and the thread cap, so any value that is
// written by exactly one index range comes out identical regardless of how
// many workers actually ran. Nested calls execute inline on the caller.
void parallel_for(std::int64_t n, const std::function<void(std::int64_t, std::int64_t)>& body);

}  // namespace bandprobe
