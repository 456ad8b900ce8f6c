#pragma once

#include <cstddef>
#include <functional>

namespace poolbert {

/// Number of worker threads used for intra-op parallelism. Initialised from
/// the POOLBERT_THREADS environment variable; 0 (the default) runs all math on
/// the calling thread.
std::size_t intra_op_threads();
void set_intra_op_threads(std::size_t threads);

/// Runs body(begin, end) over a partition of [0, n). Each index is processed
/// by exactly one invocation, so kernels that write disjoint rows stay
/// bitwise identical for every thread count.
void parallel_for(std::size_t n, std::size_t min_chunk,
                  const std::function<void(std::size_t, std::size_t)>& body);

}  // namespace poolbert
