#ifndef ATTNSEG_PARALLEL_HPP
#define ATTNSEG_PARALLEL_HPP

#include <cstddef>
#include <exception>
#include <functional>

namespace attnseg {

/// Worker count from ATTNSEG_NUM_WORKERS (default 1, clamped to [1, 256]).
int num_workers();

/// Runs fn(i) for i in [0, n) over num_workers() threads in contiguous
/// chunks. The first exception thrown by any task is rethrown after all
/// workers join. Results must be written to per-index slots so the outcome
/// does not depend on the worker count.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace attnseg

#endif  // ATTNSEG_PARALLEL_HPP
