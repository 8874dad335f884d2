#pragma once

#include <cstddef>
#include <functional>

namespace mednvc {

// Intra-op worker count. 1 means serial execution (the reproducibility
// default); the MED_NVC_THREADS environment variable caps it, 0/unset = 1.
int num_threads();
void set_num_threads(int n);
int hardware_threads();

// Splits [0, n) into contiguous chunks and runs fn(begin, end) on each.
// Every index is owned by exactly one chunk, so results do not depend on
// the worker count.
void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& fn);

}  // namespace mednvc
