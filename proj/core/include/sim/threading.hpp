#pragma once

#include <cstdint>
#include <functional>

namespace sim {

// Worker count for intra-op parallelism. Resolved once from SIM_THREADS
// (falling back to hardware_concurrency) unless overridden programmatically.
int thread_count();
void set_thread_count(int n);

// Static partition of [0, n) into at most thread_count() contiguous chunks.
// Each chunk is processed by exactly one worker, so any op whose chunks write
// disjoint outputs is bit-stable for a fixed thread count (and, with
// per-element kernels, for any thread count).
void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& chunk_fn);

// Convenience: per-index body.
void parallel_for_each(int64_t n, const std::function<void(int64_t)>& body);

}  // namespace sim
