#pragma once

#include <cstdint>
#include <functional>

namespace stni {

// Number of worker threads used by parallel_for. Defaults to the hardware
// thread count, capped by the STN_ICNN_THREADS environment variable.
int worker_count();

// Runs fn(begin, end) over a partition of [0, n) on the worker pool and
// waits for completion. Ranges are contiguous and disjoint, and every
// element is processed with the same per-element arithmetic order as the
// sequential loop, so results are bit-identical for any thread count.
// fn must only write to state owned by its range.
void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& fn);

}  // namespace stni
